import numpy as np, time, json
from dwifit import network as N, phantom as P, scheme as S, llsq as L, metrics as M
from dwifit.tensor import derive_maps, eigvals_sym3

t0 = time.perf_counter()
sch = S.generate_uniform(90, seed=7)
pools = S.split_pools(sch, 50)
train_scheme = S.GradientScheme(b=sch.b, directions=sch.directions[pools.train])

# training data: 20 phantoms x 50 slices = 1000 slices, train-pool directions only
vols, tfs = [], []
for i in range(20):
    spec = P.PhantomSpec(dims=(64,64), n_slices=50, layout="mixed", seed=1000+i)
    tf = P.make_tensor_field(spec)
    vol = P.synthesize_dwi(tf, train_scheme, s0=1000.0, sigma=50.0, seed=2000+i)
    vol.s0 = vol.s0.astype(np.float32); vol.dwi = vol.dwi.astype(np.float32)
    vols.append(vol); tfs.append(tf)
ts = N.make_training_set(vols, tfs)
del vols, tfs
print(f"dataset built {time.perf_counter()-t0:.0f}s, {ts.n_slices} slices", flush=True)

cfg = N.NetConfig(n_max=20, width=16, depth=3, lr=1e-3, lr_step=80, epochs=4, batch=16, seed=0)
t=time.perf_counter()
ck = N.train(ts, cfg, log=lambda m: print(m, flush=True))
print(f"train {time.perf_counter()-t:.0f}s", flush=True)
ck.save("/root/pkg/.scratch/proto.fdti")

# test volumes: full 90-dir scheme, unseen phantoms
spec = P.PhantomSpec(dims=(64,64), n_slices=8, layout="mixed", seed=77)
tf = P.make_tensor_field(spec)
vol = P.synthesize_dwi(tf, sch, s0=1000.0, sigma=50.0, seed=5)
gt = derive_maps(eigvals_sym3(tf.tensors))
out = {}
for d in (6, 8, 12, 20):
    sub = S.sample_subset(pools.test, d, seed=11+d)
    field = N.infer(vol, sub, ck)
    maps = derive_maps(eigvals_sym3(field.tensors))
    rep = L.fit_volume(vol, subset=sub)
    lmaps = derive_maps(eigvals_sym3(rep.field.tensors))
    fa_net = np.median([M.nrmse(maps.fa[i], gt.fa[i], tf.mask[i]) for i in range(8)])
    fa_lls = np.median([M.nrmse(lmaps.fa[i], gt.fa[i], tf.mask[i]) for i in range(8)])
    md_net = np.median([M.nrmse(maps.md[i], gt.md[i], tf.mask[i]) for i in range(8)])
    md_lls = np.median([M.nrmse(lmaps.md[i], gt.md[i], tf.mask[i]) for i in range(8)])
    out[d] = dict(fa_net=round(fa_net,4), fa_lls=round(fa_lls,4), md_net=round(md_net,4), md_lls=round(md_lls,4))
    print(d, out[d], flush=True)
print("total", time.perf_counter()-t0, flush=True)
