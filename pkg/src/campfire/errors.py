"""Exception types shared across the package."""


class CampfireError(Exception):
    """Base class for all library errors."""


class MalformedManifest(CampfireError):
    """Manifest file violates the delimited format or its invariants."""


class CorruptTile(CampfireError):
    """Tile container has a bad magic, version, or truncated payload."""


class ChannelMismatch(CampfireError):
    """Tile channel ids are inconsistent with what the caller expects."""


class MissingStats(CampfireError):
    """Normalization statistics are missing for a channel present in a tile."""


class ZeroStd(CampfireError):
    """Normalization standard deviation is not strictly positive."""


class NotEnoughPlates(CampfireError):
    """A compound appears on too few in-distribution plates to be split."""


class NoNonControlCompounds(CampfireError):
    """Cannot hold out compounds: no non-control compounds available."""


class IndivisibleTile(CampfireError):
    """Tile spatial extent is not divisible by the patch size."""


class EmptySequence(CampfireError):
    """Encoder received zero tokens."""


class EmptyChannel(CampfireError):
    """A channel has no tokens in the batch to average."""


class ShapeMismatch(CampfireError):
    """Tensor shapes are inconsistent."""


class DataUnavailable(CampfireError):
    """Required tiles or artifacts could not be loaded."""


class InsufficientData(CampfireError):
    """Not enough records to run a probe protocol."""


class DegenerateLabels(CampfireError):
    """A class has no training examples."""


class DimensionMismatch(CampfireError):
    """Embedding groups have different dimensions."""


class EmptyWell(CampfireError):
    """A well has no tiles to aggregate."""


class NoTriplets(CampfireError):
    """A batch contains fewer than two distinct labels."""


class UnknownChannel(CampfireError):
    """Requested channel id is absent from the tiles."""


class ConfigError(CampfireError):
    """Run config file has unknown keys or invalid values."""


class IOFailure(CampfireError):
    """Filesystem read/write failed."""
