"""fuselm: a trainable multitask speech-language model at desk scale.

Gated fusion over a layered (synthetic) speech encoder, a small causal
transformer LM, prompt-adaptive dynamic fusion over its layers, and paired
ASR/SER heads, all on a hand-rolled reverse-mode tape.
"""

__version__ = "0.1.0"
