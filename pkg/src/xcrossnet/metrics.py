"""SI-SDR / SDR and their improvements over the unprocessed mixture.

SDR here is the plain energy ratio 10*log10(|s|^2 / |s - est|^2), not the
BSS-eval variant with a 512-tap distortion filter; SDRi figures in the literature
use the latter and are not directly comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CAP_DB = 100.0

COLUMNS = ("id", "si_sdr_in", "si_sdr_out", "si_sdri", "sdr_in", "sdr_out", "sdri")


def _pair(est, ref) -> tuple:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.size == 0 or ref.size == 0:
        raise ValueError("metric: zero-length input")
    if est.shape != ref.shape:
        raise ValueError(f"metric: shapes differ {est.shape} vs {ref.shape}")
    return est, ref


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return CAP_DB
    if num <= 0.0:
        return -CAP_DB
    return float(min(10.0 * np.log10(num / den), CAP_DB))


def si_sdr(est, ref) -> float:
    est, ref = _pair(est, ref)
    ss = float(ref @ ref)
    if ss <= 0.0:
        raise ValueError("si_sdr: zero-energy reference")
    alpha = float(est @ ref) / ss
    proj = alpha * ref
    resid = est - proj
    return _ratio_db(float(proj @ proj), float(resid @ resid))


def sdr(est, ref) -> float:
    est, ref = _pair(est, ref)
    d = ref - est
    return _ratio_db(float(ref @ ref), float(d @ d))


def si_sdri(est, ref, mix) -> float:
    return si_sdr(est, ref) - si_sdr(mix, ref)


def sdri(est, ref, mix) -> float:
    return sdr(est, ref) - sdr(mix, ref)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, utt_id: str, est, ref, mix) -> dict:
        si_in, si_out = si_sdr(mix, ref), si_sdr(est, ref)
        sd_in, sd_out = sdr(mix, ref), sdr(est, ref)
        row = {"id": utt_id, "si_sdr_in": si_in, "si_sdr_out": si_out, "si_sdri": si_out - si_in,
               "sdr_in": sd_in, "sdr_out": sd_out, "sdri": sd_out - sd_in}
        self.rows.append(row)
        return row

    def aggregate(self) -> dict:
        if not self.rows:
            return {c: float("nan") for c in COLUMNS[1:]}
        return {c: float(np.mean([r[c] for r in self.rows])) for c in COLUMNS[1:]}

    def to_jsonl(self) -> str:
        lines = [json.dumps({c: r[c] for c in COLUMNS}) for r in self.rows]
        lines.append(json.dumps({"id": "__mean__", **self.aggregate(), **self.extras}))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'id':<24}" + "".join(f"{c:>12}" for c in COLUMNS[1:])
        out = [head, "-" * len(head)]
        for r in self.rows:
            out.append(f"{str(r['id']):<24}" + "".join(f"{r[c]:>12.3f}" for c in COLUMNS[1:]))
        agg = self.aggregate()
        out.append("-" * len(head))
        out.append(f"{'mean':<24}" + "".join(f"{agg[c]:>12.3f}" for c in COLUMNS[1:]))
        out.append("(SDR is an energy ratio, not BSS-eval)")
        return "\n".join(out)
