"""CSV read/write for sensor sample datasets."""

from __future__ import annotations

from .mae import SensorSample

__all__ = ["save_dataset", "load_dataset"]


def save_dataset(samples: list[SensorSample], path) -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    n = len(samples[0].theta)
    m = len(samples[0].tension)
    cols = (
        [f"theta_{i}" for i in range(n)]
        + [f"f_{i}" for i in range(m)]
        + [f"l_{i}" for i in range(m)]
    )
    with open(path, "w") as out:
        out.write(",".join(cols) + "\n")
        for s in samples:
            s.validate(n, m)
            vals = list(s.theta) + list(s.tension) + list(s.length)
            out.write(",".join(format(v, ".17g") for v in vals) + "\n")


def load_dataset(path) -> list[SensorSample]:
    with open(path) as inp:
        header = inp.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("theta_"))
        m = sum(1 for c in header if c.startswith("f_") and not c.startswith("f_ref"))
        if n < 1 or m < 1 or len(header) != n + 2 * m:
            raise ValueError(f"unrecognized dataset header in {path}")
        samples = []
        for line in inp:
            if not line.strip():
                continue
            vals = [float(v) for v in line.split(",")]
            samples.append(
                SensorSample(vals[:n], vals[n:n + m], vals[n + m:n + 2 * m])
            )
    return samples
