"""URL + IP multimodal malicious-URL detection at desk scale."""

__version__ = "0.1.0"
