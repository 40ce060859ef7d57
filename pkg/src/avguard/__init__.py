"""Audio-visual defence against inaudible voice-command injection."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("avguard")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0+unknown"
