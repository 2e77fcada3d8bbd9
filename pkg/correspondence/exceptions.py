"""Error hierarchy shared by the correspondence toolkit and its commands."""

USAGE = 'usage'
IO = 'io'
NUMERIC = 'numeric'

EXIT_CODES = {
    USAGE: 2,
    IO: 3,
    NUMERIC: 4,
}


class CorrespondenceError(Exception):
    """Base class for all toolkit errors"""

    category = NUMERIC

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]


class InvalidConstraintSpec(CorrespondenceError):
    """Variance bounds violate the ordered chain or the one-pixel floor"""

    category = USAGE


class ShapeMismatch(CorrespondenceError):
    """Grids, images or flows that must agree in size do not"""

    category = USAGE


class DegenerateHomography(CorrespondenceError):
    """A homography is singular, non-convex or projects points to infinity"""


class ImageTooSmall(CorrespondenceError):
    """Base image cannot hold the requested crop plus margin"""

    category = USAGE


class TooFewMatches(CorrespondenceError):
    """Fewer than four correspondences are available for a homography"""


class DatasetEmpty(CorrespondenceError):
    """A dataset directory contains no samples"""

    category = IO


class NonFiniteLoss(CorrespondenceError):
    """Training produced a NaN or infinite loss"""


class FormatError(CorrespondenceError):
    """A file does not follow the expected on-disk format"""

    category = IO


class InvalidRotation(CorrespondenceError):
    """A rotation matrix is not orthonormal"""

    category = USAGE
