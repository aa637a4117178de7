"""HoloMambaRec: holographic item/attribute binding with a selective state-space encoder."""

__version__ = "0.1.0"
