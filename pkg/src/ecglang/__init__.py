"""Wave-token language modelling for single-lead ECG.

Records are filtered, delineated into P/QRS/T segments, encoded by per-wave
autoencoders, quantised into a discrete vocabulary, and assembled into
heartbeat sentences for a transformer pretrained with masked-token prediction
and fine-tuned with LoRA adapters.
"""

__version__ = "0.1.0"
