"""Exception types raised across the package, one per failure contract."""


class DwifitError(Exception):
    """Base class for all package-specific errors."""


# --- tensor algebra ---------------------------------------------------------

class NonPositiveSignal(DwifitError):
    """Log-signal ratio requested for a signal <= 0."""


class ZeroB(DwifitError):
    """Log-signal ratio requested at b = 0."""


# --- gradient schemes -------------------------------------------------------

class TooFewDirections(DwifitError):
    """Fewer directions than the tensor model supports."""


class TooManyDirections(DwifitError):
    """More directions than the configured channel budget."""


class BadSplit(DwifitError):
    """Train/test pool split bounds violated."""


class SubsetTooSmall(DwifitError):
    pass


class SubsetTooLarge(DwifitError):
    pass


class SubsetOutOfRange(DwifitError):
    """Inference subset size outside [6, n_max]."""


# --- phantoms ---------------------------------------------------------------

class DimsTooSmall(DwifitError):
    pass


# --- least squares fitting --------------------------------------------------

class NotEnoughDirections(DwifitError):
    """Fewer than six measurements supplied to the fit."""


class RankDeficient(DwifitError):
    """Design matrix rank below six (collinear directions)."""


# --- autodiff engine --------------------------------------------------------

class ShapeMismatch(DwifitError):
    pass


class OddSpatialDims(DwifitError):
    """Spatial dims not divisible as the pooling stage requires."""


class ImageTooSmall(DwifitError):
    """Image has fewer rows than requested pooling bands."""


class DisconnectedLoss(DwifitError):
    """Backward pass reached no parameter from the loss node."""


class NonFiniteValue(DwifitError):
    """NaN/Inf surfaced in an array with finite-value checks enabled."""


# --- network ----------------------------------------------------------------

class EmptyDataset(DwifitError):
    pass


class NonFiniteLoss(DwifitError):
    """Training loss became NaN/Inf; message carries diagnostics."""


class ZeroB0Mean(DwifitError):
    """Cannot normalize: mean b=0 intensity over the mask is zero."""


# --- metrics ----------------------------------------------------------------

class EmptyMask(DwifitError):
    pass


class ZeroReference(DwifitError):
    """NRMSE undefined: reference is all-zero over the mask."""


# --- file formats -----------------------------------------------------------

class BadMagic(DwifitError):
    pass


class HeaderJsonInvalid(DwifitError):
    pass


class PayloadTruncated(DwifitError):
    pass


class ColumnCountMismatch(DwifitError):
    """bvals/bvecs column counts disagree."""


class NonUnitDirection(DwifitError):
    """Direction norm too far from 1 to renormalize safely."""


class ManifestShapeMismatch(DwifitError):
    """Checkpoint manifest shapes/offsets inconsistent with the payload."""


class BadWindow(DwifitError):
    """Rendering window has hi <= lo."""
