"""Zero-phase filter chain applied before delineation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .ingest import EcgRecord


@dataclass
class FilterSpec:
    highpass_cutoff: float = 0.5
    highpass_order: int = 2
    notch_freq: float = 50.0
    notch_q: float = 30.0

    def validate(self, fs: float) -> None:
        if not 0 < self.highpass_cutoff < self.notch_freq < fs / 2:
            raise ValueError(
                f"need 0 < highpass_cutoff ({self.highpass_cutoff}) < notch_freq "
                f"({self.notch_freq}) < fs/2 ({fs / 2})")
        if self.highpass_order < 1:
            raise ValueError("highpass_order must be >= 1")
        if self.notch_q <= 0:
            raise ValueError("notch_q must be > 0")


def _filtfilt_reflect(sos, x, padlen):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    padded = np.pad(x, padlen, mode="reflect") if x.size > 1 else np.pad(x, padlen, mode="edge")
    y = signal.sosfiltfilt(sos, padded, padtype=None)
    return y[padlen:padlen + x.size]


def butterworth_highpass(samples, fs: float, cutoff: float = 0.5, order: int = 2) -> np.ndarray:
    """Forward-backward Butterworth high-pass in second-order sections.

    The input is mirror-extended by ``3 * order * fs / cutoff`` samples at both
    ends before filtering so the start-up transient falls outside the record.
    """
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, Nyquist={fs / 2})")
    if order < 1:
        raise ValueError("order must be >= 1")
    sos = signal.butter(order, cutoff, btype="highpass", fs=fs, output="sos")
    return _filtfilt_reflect(sos, samples, int(np.ceil(3 * order * fs / cutoff)))


def notch_filter(samples, fs: float, freq: float = 50.0, q: float = 30.0) -> np.ndarray:
    """Forward-backward second-order IIR notch at ``freq`` with quality ``q``."""
    if not 0 < freq < fs / 2:
        raise ValueError(f"notch frequency {freq} Hz must lie in (0, Nyquist={fs / 2})")
    if q <= 0:
        raise ValueError("q must be > 0")
    b, a = signal.iirnotch(freq, q, fs=fs)
    sos = signal.tf2sos(b, a)
    # transient length scales with the inverse bandwidth freq / q
    return _filtfilt_reflect(sos, samples, int(np.ceil(6 * fs * q / freq)))


def preprocess_samples(samples, fs: float, spec: FilterSpec | None = None) -> np.ndarray:
    spec = spec or FilterSpec()
    spec.validate(fs)
    y = butterworth_highpass(samples, fs, spec.highpass_cutoff, spec.highpass_order)
    return notch_filter(y, fs, spec.notch_freq, spec.notch_q)


def preprocess_record(record: EcgRecord, spec: FilterSpec | None = None) -> EcgRecord:
    """High-pass then notch; id, fs and labels are carried over."""
    return record.replace_samples(preprocess_samples(record.samples, record.fs, spec))


def resample_linear(samples, fs_in: float, fs_out: float) -> np.ndarray:
    """Plain linear-interpolation resampler for mixed-rate datasets."""
    x = np.asarray(samples, dtype=np.float64)
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    n_out = max(1, int(round(x.size * fs_out / fs_in)))
    t_out = np.arange(n_out) / fs_out
    t_in = np.arange(x.size) / fs_in
    return np.interp(t_out, t_in, x)
