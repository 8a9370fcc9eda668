"""Dynamic-convolution tensor reconstruction network.

Each DW image is fused with its gradient direction by a per-image dynamic
convolution: a small generator network turns (row-band GAP of the image ||
direction vector) into the 198 weights and biases of three 3x3 conv layers,
whose 3-channel output feature map carries the direction encoding.  Feature
maps for however many directions are available (6 up to `n_max`) are stacked
with the b=0 image into a fixed channel budget of 3*n_max + 1 — missing
direction slots are filled cyclically with duplicates — and a U-Net regresses
the six tensor element maps.  One trained checkpoint therefore serves any
direction count and any orientations.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import io_formats
from .errors import (EmptyDataset, NonFiniteLoss, SubsetOutOfRange,
                     TooFewDirections, TooManyDirections, ZeroB0Mean)
from .phantom import TensorField

# tensors are regressed in units of mm^2/s * 1000 so targets are O(1)
TARGET_SCALE = 1000.0

# generated parameter layout: three conv layers, (27+3) + (81+3) + (81+3)
DYN_LAYER_SIZES = (30, 84, 84)
DYN_TOTAL = 198

LOSS_CSV_HEADER = "epoch,lr,train_loss,val_loss"


@dataclass
class NetConfig:
    n_max: int = 20
    gap_len: int = 10
    depth: int = 3
    width: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step: int = 80
    epochs: int = 100
    batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 6:
            raise ValueError("n_max must be >= 6")
        if self.gap_len < 1:
            raise ValueError("gap_len must be >= 1")
        if self.width < 4:
            raise ValueError("width must be >= 4")

    @property
    def in_channels(self):
        return 3 * self.n_max + 1


@dataclass
class DynKernelParams:
    """Generated weights/biases of the three dynamic conv layers (graph nodes)."""
    w1: ad.Tensor   # (n, 3, 1, 3, 3)
    b1: ad.Tensor   # (n, 3)
    w2: ad.Tensor   # (n, 3, 3, 3, 3)
    b2: ad.Tensor   # (n, 3)
    w3: ad.Tensor   # (n, 3, 3, 3, 3)
    b3: ad.Tensor   # (n, 3)


@dataclass
class Checkpoint:
    config: NetConfig
    params: dict                    # name -> float32 ndarray
    loss_history: list = field(default_factory=list)
    epoch: int = 0

    def save(self, path):
        io_formats.save_checkpoint(
            path, config=asdict(self.config), params=self.params,
            meta={"epoch": self.epoch, "loss_history": self.loss_history})

    @classmethod
    def load(cls, path):
        config, params, meta = io_formats.load_checkpoint(path)
        return cls(config=NetConfig(**config), params=params,
                   loss_history=[tuple(row) for row in meta["loss_history"]],
                   epoch=meta["epoch"])


def write_history_csv(path, history):
    with open(path, "w") as f:
        f.write(LOSS_CSV_HEADER + "\n")
        for epoch, lr, train_loss, val_loss in history:
            f.write(f"{epoch},{lr:.10g},{train_loss:.10g},{val_loss:.10g}\n")


class DynConvNet:
    """Generator (theta_psi) plus U-Net (theta_f) with their parameter store."""

    def __init__(self, cfg, state=None):
        self.cfg = cfg
        self.params = ad.ParamStore()
        self._build(np.random.Generator(np.random.Philox(key=cfg.seed)))
        if state is not None:
            self.params.load_state_dict(state)

    # -- parameters ----------------------------------------------------------

    def _conv_param(self, rng, name, c_out, c_in, gain=1.0):
        std = gain * np.sqrt(2.0 / (c_in * 9))
        self.params.create(f"{name}.w", rng.normal(
            0.0, std, size=(c_out, c_in, 3, 3)).astype(np.float32))
        self.params.create(f"{name}.b", np.zeros(c_out, dtype=np.float32))

    def _build(self, rng):
        cfg = self.cfg
        vec_len = cfg.gap_len + 3
        self.params.create("psi.conv.w", rng.normal(
            0.0, np.sqrt(2.0 / 3), size=(4, 1, 3)).astype(np.float32))
        self.params.create("psi.conv.b", np.zeros(4, dtype=np.float32))
        self.params.create("psi.fc1.w", rng.normal(
            0.0, np.sqrt(2.0 / (4 * vec_len)), size=(64, 4 * vec_len)).astype(np.float32))
        self.params.create("psi.fc1.b", np.zeros(64, dtype=np.float32))
        # kept small so freshly generated kernels start near-contractive
        self.params.create("psi.fc2.w", rng.normal(
            0.0, 0.03, size=(DYN_TOTAL, 64)).astype(np.float32))
        self.params.create("psi.fc2.b", np.zeros(DYN_TOTAL, dtype=np.float32))

        widths = [cfg.width * 2 ** k for k in range(cfg.depth + 1)]
        ci = cfg.in_channels
        for k in range(cfg.depth):
            self._conv_param(rng, f"unet.enc{k}.c1", widths[k], ci)
            self._conv_param(rng, f"unet.enc{k}.c2", widths[k], widths[k])
            ci = widths[k]
        self._conv_param(rng, "unet.mid.c1", widths[-1], widths[-2])
        self._conv_param(rng, "unet.mid.c2", widths[-1], widths[-1])
        for k in reversed(range(cfg.depth)):
            self._conv_param(rng, f"unet.dec{k}.c1", widths[k],
                             widths[k + 1] + widths[k])
            self._conv_param(rng, f"unet.dec{k}.c2", widths[k], widths[k])
        self._conv_param(rng, "unet.out", 6, widths[0])

    def _conv(self, x, name):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    # -- dynamic encoding ------------------------------------------------------

    def generate_dyn_params(self, dw, direction):
        """Run the generator: (GAP(dw) || direction) -> 198 kernel values.

        `dw` is a (n, 1, h, w) graph tensor of normalized DW images that all
        share the direction; returns per-sample conv parameters.
        """
        n = dw.data.shape[0]
        pooled = ad.band_gap(dw, self.cfg.gap_len)
        direction = np.asarray(direction, dtype=dw.data.dtype)
        dir_vec = ad.Tensor(np.tile(direction, (n, 1)))
        vec = ad.concat_channels([pooled, dir_vec])
        x = ad.reshape(vec, (n, 1, self.cfg.gap_len + 3))
        x = ad.relu(ad.conv1d(x, self.params["psi.conv.w"], self.params["psi.conv.b"]))
        x = ad.relu(ad.dense(x, self.params["psi.fc1.w"], self.params["psi.fc1.b"]))
        omega = ad.dense(x, self.params["psi.fc2.w"], self.params["psi.fc2.b"])
        return DynKernelParams(
            w1=ad.reshape(ad.narrow(omega, 0, 27), (n, 3, 1, 3, 3)),
            b1=ad.narrow(omega, 27, 3),
            w2=ad.reshape(ad.narrow(omega, 30, 81), (n, 3, 3, 3, 3)),
            b2=ad.narrow(omega, 111, 3),
            w3=ad.reshape(ad.narrow(omega, 114, 81), (n, 3, 3, 3, 3)),
            b3=ad.narrow(omega, 195, 3))

    @staticmethod
    def dyn_conv_apply(dw, kernels):
        """Fuse one DW image with its generated kernels: conv-ReLU x2, conv."""
        x = ad.relu(ad.conv2d(dw, kernels.w1, kernels.b1))
        x = ad.relu(ad.conv2d(x, kernels.w2, kernels.b2))
        return ad.conv2d(x, kernels.w3, kernels.b3)

    def assemble_input(self, features, b0):
        """Stack [b0, f_1..f_d, cyclic duplicates] into the channel budget."""
        d = len(features)
        if d < 6:
            raise TooFewDirections(f"need >= 6 directions, got {d}")
        if d > self.cfg.n_max:
            raise TooManyDirections(f"{d} directions exceed n_max={self.cfg.n_max}")
        slots = [b0] + list(features)
        for i in range(d, self.cfg.n_max):
            slots.append(features[i % d])
        return ad.concat_channels(slots)

    def encode(self, dwi, directions):
        """Per-direction dynamic features from a (n, d, h, w) DW array."""
        features = []
        for i in range(dwi.shape[1]):
            dw = ad.Tensor(dwi[:, i:i + 1])
            kernels = self.generate_dyn_params(dw, directions[i])
            features.append(self.dyn_conv_apply(dw, kernels))
        return features

    # -- U-Net ------------------------------------------------------------------

    def forward(self, stack):
        """U-Net from the assembled feature stack to 6 tensor-element maps."""
        h, w = stack.data.shape[2:]
        if h % 2 ** self.cfg.depth or w % 2 ** self.cfg.depth:
            raise ad.OddSpatialDims(
                f"{h}x{w} not divisible by 2^{self.cfg.depth}")
        x = stack
        skips = []
        for k in range(self.cfg.depth):
            x = ad.relu(self._conv(x, f"unet.enc{k}.c1"))
            x = ad.relu(self._conv(x, f"unet.enc{k}.c2"))
            skips.append(x)
            x = ad.maxpool2(x)
        x = ad.relu(self._conv(x, "unet.mid.c1"))
        x = ad.relu(self._conv(x, "unet.mid.c2"))
        for k in reversed(range(self.cfg.depth)):
            x = ad.upsample2(x)
            x = ad.concat_channels([x, skips[k]])
            x = ad.relu(self._conv(x, f"unet.dec{k}.c1"))
            x = ad.relu(self._conv(x, f"unet.dec{k}.c2"))
        return self._conv(x, "unet.out")

    def predict(self, b0, dwi, directions):
        """Full pass from normalized arrays to the 6-channel output tensor."""
        features = self.encode(dwi, directions)
        stack = self.assemble_input(features, ad.Tensor(b0[:, None]))
        return self.forward(stack)


def normalize_inputs(vol):
    """Scale each slice by its mean b=0 intensity over the mask, clip to [0, 3].

    Returns float32 (b0, dwi) arrays ready for the network.
    """
    s = vol.n_slices
    b0 = np.empty(vol.s0.shape, dtype=np.float32)
    dwi = np.empty(vol.dwi.shape, dtype=np.float32)
    for i in range(s):
        m = vol.mask[i]
        if not m.any():
            raise ZeroB0Mean(f"slice {i}: empty mask")
        mean = vol.s0[i][m].mean()
        if mean <= 0:
            raise ZeroB0Mean(f"slice {i}: mean b0 over mask is {mean}")
        b0[i] = np.clip(vol.s0[i] / mean, 0.0, 3.0)
        dwi[i] = np.clip(vol.dwi[i] / mean, 0.0, 3.0)
    return b0, dwi


@dataclass
class SlicePool:
    """Normalized training slices sharing one candidate direction pool."""
    b0: np.ndarray           # (m, h, w) float32
    dwi: np.ndarray          # (m, p, h, w) float32
    mask: np.ndarray         # (m, h, w) bool
    target: np.ndarray       # (m, 6, h, w) float32, ground truth * 1000
    directions: np.ndarray   # (p, 3)

    @property
    def n_slices(self):
        return self.b0.shape[0]


def _pool_chunk(vol, truth, pool):
    b0, dwi = normalize_inputs(vol)
    target = (truth.tensors * TARGET_SCALE).transpose(0, 3, 1, 2).astype(np.float32)
    return b0, dwi[:, pool], vol.mask.astype(bool), target


def make_training_set(volumes, truths, pool=None, total_slices=None):
    """Normalize volumes and stack their slices into one SlicePool.

    `pool` selects which scheme directions are candidates (default: all).
    All volumes must share dims and scheme.  `volumes`/`truths` may be
    generators; passing `total_slices` preallocates the pool arrays and
    fills them volume by volume, so only one volume is ever in flight —
    the route for datasets that approach RAM size.
    """
    pairs = zip(volumes, truths)
    if total_slices is None:
        chunks = []
        for vol, truth in pairs:
            if pool is None:
                pool = np.arange(vol.scheme.n_directions)
            directions = vol.scheme.directions[pool].copy()
            chunks.append(_pool_chunk(vol, truth, pool))
        if not chunks:
            raise EmptyDataset("no volumes")
        return SlicePool(*(np.concatenate(parts) for parts in zip(*chunks)),
                         directions=directions)

    out = None
    cursor = 0
    for vol, truth in pairs:
        if pool is None:
            pool = np.arange(vol.scheme.n_directions)
        b0, dwi, mask, target = _pool_chunk(vol, truth, pool)
        if out is None:
            shape = (total_slices,) + b0.shape[1:]
            out = SlicePool(
                b0=np.empty(shape, np.float32),
                dwi=np.empty((total_slices,) + dwi.shape[1:], np.float32),
                mask=np.empty(shape, bool),
                target=np.empty((total_slices, 6) + shape[1:], np.float32),
                directions=vol.scheme.directions[pool].copy())
        sl = slice(cursor, cursor + b0.shape[0])
        out.b0[sl], out.dwi[sl] = b0, dwi
        out.mask[sl], out.target[sl] = mask, target
        cursor += b0.shape[0]
    if out is None:
        raise EmptyDataset("no volumes")
    if cursor != total_slices:
        raise ValueError(f"volumes held {cursor} slices, expected {total_slices}")
    return out


def _batch_loss(net, pool, idx, subset, with_mask=True):
    b0 = pool.b0[idx]
    dwi = pool.dwi[idx][:, subset]
    out = net.predict(b0, dwi, pool.directions[subset])
    mask = pool.mask[idx][:, None].astype(np.float32) if with_mask else None
    return ad.mse_loss(out, pool.target[idx], mask=mask)


def train(train_set, cfg, val_set=None, log=None):
    """Train a fresh network on a SlicePool; returns the checkpoint.

    Every batch draws a direction count d ~ Uniform{6..n_max} and a fresh
    d-subset of the candidate pool, so the net sees a different scheme each
    step.  Loss is masked MSE against the scaled tensor maps; optimizer is
    Adam with the configured step decay.
    """
    if train_set.n_slices == 0:
        raise EmptyDataset("empty training set")
    p = len(train_set.directions)
    if p < 6:
        raise TooFewDirections(f"direction pool of {p} < 6")
    d_hi = min(cfg.n_max, p)

    net = DynConvNet(cfg)
    state = ad.AdamState()
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    m = train_set.n_slices
    history = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)
        perm = rng.permutation(m)
        total, seen = 0.0, 0
        for start in range(0, m, cfg.batch):
            idx = perm[start:start + cfg.batch]
            d = int(rng.integers(6, d_hi + 1))
            subset = rng.choice(p, size=d, replace=False)
            loss = _batch_loss(net, train_set, idx, subset)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(
                    f"loss={value} at epoch {epoch} step {start // cfg.batch} "
                    f"(lr={lr}, d={d})")
            ad.backward(loss, net.params)
            del loss   # drop the graph before the next one is built
            ad.adam_step(net.params, state, lr)
            total += value * len(idx)
            seen += len(idx)
        train_loss = total / seen

        val_loss = float("nan")
        if val_set is not None and val_set.n_slices:
            vrng = np.random.Generator(
                np.random.Philox(key=cfg.seed * 1000003 + epoch))
            vtotal, vseen = 0.0, 0
            pv = len(val_set.directions)
            for start in range(0, val_set.n_slices, cfg.batch):
                idx = np.arange(start, min(start + cfg.batch, val_set.n_slices))
                d = int(vrng.integers(6, min(cfg.n_max, pv) + 1))
                subset = vrng.choice(pv, size=d, replace=False)
                loss = _batch_loss(net, val_set, idx, subset)
                vtotal += float(loss.data) * len(idx)
                vseen += len(idx)
                del loss
            val_loss = vtotal / vseen

        history.append((epoch, lr, train_loss, val_loss))
        if log is not None:
            log(f"epoch {epoch}: lr={lr:.2g} train={train_loss:.5f} "
                f"val={val_loss:.5f}")

    return Checkpoint(config=cfg, params=net.params.state_dict(),
                      loss_history=history, epoch=cfg.epochs)


def infer(vol, subset, ckpt, chunk=8):
    """Reconstruct a TensorField from a DwiVolume using one checkpoint.

    The subset may hold any 6..n_max direction indices of the volume's
    scheme, including directions never seen in training.
    """
    subset = np.asarray(subset, dtype=int)
    if not (6 <= len(subset) <= ckpt.config.n_max):
        raise SubsetOutOfRange(
            f"subset size {len(subset)} outside [6, {ckpt.config.n_max}]")
    net = DynConvNet(ckpt.config, state=ckpt.params)
    b0, dwi = normalize_inputs(vol)
    dirs = vol.scheme.directions[subset]

    s, h, w = b0.shape
    tensors = np.zeros((s, h, w, 6))
    for start in range(0, s, chunk):
        sl = slice(start, min(start + chunk, s))
        out = net.predict(b0[sl], dwi[sl][:, subset], dirs)
        tensors[sl] = out.data.transpose(0, 2, 3, 1) / TARGET_SCALE
    tensors[~vol.mask] = 0.0
    return TensorField(tensors=tensors, mask=vol.mask.copy())
