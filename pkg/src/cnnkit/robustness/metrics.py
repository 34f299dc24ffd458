"""Accuracy, corruption error and flip-rate reductions.

mCE and mFR are reduced in exact rational arithmetic and rounded to float once.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np


def top1(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in length")
    if p.size == 0:
        raise ValueError("top-1 of an empty set is undefined")
    return float(Fraction(int((p == y).sum()), int(p.size)))


def _q(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


def corruption_errors(errors: Mapping[str, Mapping[int, float]],
                      baseline: Mapping[str, Mapping[int, float]] | None = None) -> dict[str, Fraction]:
    """Per-kind CE: sum over severities of the error, divided by the baseline's sum when one is given."""
    if not errors:
        raise ValueError("no corruption kinds given")
    out = {}
    for kind, per_sev in errors.items():
        total = sum((_q(e) for e in per_sev.values()), Fraction(0))
        if baseline is None:
            out[kind] = total / len(per_sev)
            continue
        if kind not in baseline:
            raise KeyError(f"baseline table has no entry for corruption kind {kind!r}")
        base = sum((_q(baseline[kind][s]) for s in per_sev), Fraction(0))
        if base == 0:
            raise ZeroDivisionError(f"baseline error for {kind!r} sums to zero")
        out[kind] = total / base
    return out


def mce_exact(errors, baseline=None) -> Fraction:
    """Mean corruption error as an exact fraction (in units of 1, not percent)."""
    ce = corruption_errors(errors, baseline)
    return sum(ce.values(), Fraction(0)) / len(ce)


def mean_corruption_error(errors, baseline=None) -> float:
    """mCE in percent."""
    return float(mce_exact(errors, baseline) * 100)


def flip_count(seq: Sequence) -> tuple[int, int]:
    seq = list(seq)
    if len(seq) < 2:
        raise ValueError(f"a flip-rate sequence needs at least 2 frames, got {len(seq)}")
    return sum(a != b for a, b in zip(seq, seq[1:])), len(seq) - 1


def flip_rate_exact(sequences) -> Fraction:
    """Average over sequences of (adjacent prediction changes) / (adjacent pairs)."""
    sequences = [sequences] if sequences and np.ndim(sequences[0]) == 0 else list(sequences)
    if not sequences:
        raise ValueError("no prediction sequences given")
    rates = [Fraction(*flip_count(s)) for s in sequences]
    return sum(rates, Fraction(0)) / len(rates)


def flip_rate(sequences) -> float:
    return float(flip_rate_exact(sequences))


def mfr_exact(rates: Mapping[str, Fraction | float], baseline: Mapping[str, float] | None = None) -> Fraction:
    if not rates:
        raise ValueError("no perturbation kinds given")
    terms = []
    for kind, fr in rates.items():
        fr = _q(fr)
        if baseline is not None:
            if kind not in baseline:
                raise KeyError(f"baseline table has no entry for perturbation kind {kind!r}")
            fr = fr / _q(baseline[kind])
        terms.append(fr)
    return sum(terms, Fraction(0)) / len(terms)


def mean_flip_rate(rates, baseline=None) -> float:
    """mFR in percent."""
    return float(mfr_exact(rates, baseline) * 100)
