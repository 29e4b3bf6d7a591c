"""Synthesize one regular record, clean it, delineate it and compare to the generator's truth."""
import numpy as np

from ecglang.delineate import delineate_record, extract_segments, match_fiducials
from ecglang.ingest import generate_synthetic
from ecglang.preprocess import preprocess_record

records, truths = generate_synthetic(1, fs=500, duration=10.0, rhythm_class="regular", seed=7)
rec = preprocess_record(records[0])
beats = delineate_record(rec.samples.astype(np.float64), rec.fs)

print(f"{rec.record_id}: {len(beats)} beats detected, {len(truths[0].beats)} in truth")
for i, b in enumerate(beats[:3]):
    print(f"  beat {i}: R={b.r_peak} P={b.p} QRS={b.qrs} T={b.t}")

stats = match_fiducials(beats, truths[0].beats, r_tolerance=5, tolerance=10)
for w in ("P", "QRS", "T"):
    hits = sum(stats.get(f"{w}_{f}_hit", 0) for f in ("onset", "peak", "offset"))
    total = sum(stats.get(f"{w}_{f}_total", 0) for f in ("onset", "peak", "offset"))
    print(f"  {w:>3} fiducials within 20 ms: {hits}/{total}")

segments = extract_segments(rec.samples, beats, rec.record_id)
lengths = {w: [len(s.samples) for s in segments if s.wave_type == w] for w in ("P", "QRS", "T")}
print("  segment lengths (median samples):", {w: int(np.median(v)) for w, v in lengths.items()})
