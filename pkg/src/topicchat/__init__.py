"""Dialogue generation with curriculum training and a topic-switch chat runtime.

Subpackages cover the full pipeline: tree corpus loading and extraction
(`graph`), byte-level BPE (`bpe`), the numpy autograd and transformer nets
(`tensor`, `nn`, `losses`), staged training (`training`), the topic-switch
chat engine (`runtime`), self-chat evaluation (`evalsuite`), and the HTTP
service (`service`).
"""

__version__ = "0.1.0"
