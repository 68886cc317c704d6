"""Exception types raised across the package."""


class TactSplatError(Exception):
    pass


class BehindCamera(TactSplatError):
    pass


class ShapeMismatch(TactSplatError, ValueError):
    pass


class ImageTooSmall(TactSplatError, ValueError):
    pass


class EmptyTouchSet(TactSplatError, ValueError):
    pass


class EmptyScene(TactSplatError, ValueError):
    pass


class EmptyCloud(TactSplatError, ValueError):
    pass


class MeshEmpty(TactSplatError, ValueError):
    pass


class NoContact(TactSplatError):
    pass


class MissingFile(TactSplatError, FileNotFoundError):
    pass


class MalformedManifest(TactSplatError, ValueError):
    pass


class MalformedPly(TactSplatError, ValueError):
    pass


class UnsupportedVersion(TactSplatError, ValueError):
    pass


class MalformedJson(TactSplatError, ValueError):
    pass


class ValidationError(TactSplatError, ValueError):
    pass
