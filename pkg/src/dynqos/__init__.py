"""Dynamic QoS estimation with spatiotemporal graph convolution over a
user x service x time tensor."""

__version__ = "0.1.0"
