"""Single-codebook neural audio codec for speech, music, and sound.

The codec maps 24 kHz mono audio to 75 discrete tokens per second through
a convolutional encoder with mixture-of-experts transformer layers, a
partitioned domain-adaptive vector quantizer with a single 16384-entry
codebook, and a mirrored decoder.
"""

__version__ = "0.1.0"
