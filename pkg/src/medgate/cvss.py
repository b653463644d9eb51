"""CVSS v3.0 vector parsing and base/temporal/environmental scoring.

Implements the v3.0 equations exactly: exploitability and impact sub-scores,
the changed-scope impact polynomial, temporal multipliers, and the modified
environmental metrics with confidentiality/integrity/availability
requirements.  All scores pass through the one-decimal ceiling helper, which
works on integers to avoid binary floating-point drift at band edges.

Pure functions over an immutable vector value; safe for unrestricted
concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass


class CvssError(Exception):
    """Base class for vector/scoring errors."""


class MalformedVector(CvssError):
    pass


class MissingBaseMetric(CvssError):
    pass


class IllegalValue(CvssError):
    pass


PREFIX = "CVSS:3.0"

BASE_METRICS = ("AV", "AC", "PR", "UI", "S", "C", "I", "A")
TEMPORAL_METRICS = ("E", "RL", "RC")
ENVIRONMENTAL_METRICS = (
    "CR",
    "IR",
    "AR",
    "MAV",
    "MAC",
    "MPR",
    "MUI",
    "MS",
    "MC",
    "MI",
    "MA",
)
METRIC_ORDER = BASE_METRICS + TEMPORAL_METRICS + ENVIRONMENTAL_METRICS

ALLOWED = {
    "AV": "NALP",
    "AC": "LH",
    "PR": "NLH",
    "UI": "NR",
    "S": "UC",
    "C": "HLN",
    "I": "HLN",
    "A": "HLN",
    "E": "XUPFH",
    "RL": "XOTWU",
    "RC": "XURC",
    "CR": "XHML",
    "IR": "XHML",
    "AR": "XHML",
    "MAV": "XNALP",
    "MAC": "XLH",
    "MPR": "XNLH",
    "MUI": "XNR",
    "MS": "XUC",
    "MC": "XHLN",
    "MI": "XHLN",
    "MA": "XHLN",
}

AV_WEIGHT = {"N": 0.85, "A": 0.62, "L": 0.55, "P": 0.2}
AC_WEIGHT = {"L": 0.77, "H": 0.44}
# PR weight depends on scope: higher weight when a changed scope is in reach.
PR_WEIGHT = {
    "U": {"N": 0.85, "L": 0.62, "H": 0.27},
    "C": {"N": 0.85, "L": 0.68, "H": 0.5},
}
UI_WEIGHT = {"N": 0.85, "R": 0.62}
CIA_WEIGHT = {"H": 0.56, "L": 0.22, "N": 0.0}
E_WEIGHT = {"X": 1.0, "U": 0.91, "P": 0.94, "F": 0.97, "H": 1.0}
RL_WEIGHT = {"X": 1.0, "O": 0.95, "T": 0.96, "W": 0.97, "U": 1.0}
RC_WEIGHT = {"X": 1.0, "U": 0.92, "R": 0.96, "C": 1.0}
REQUIREMENT_WEIGHT = {"X": 1.0, "H": 1.5, "M": 1.0, "L": 0.5}


def roundup(x: float) -> float:
    """Smallest one-decimal value >= x, via integer arithmetic on x * 100000."""
    if not 0.0 <= x <= 10.0:
        raise ValueError(f"score out of range: {x}")
    scaled = round(x * 100000)
    if scaled % 10000 == 0:
        return scaled / 100000.0
    return (scaled // 10000 + 1) / 10.0


def severity(score: float) -> str:
    if score == 0.0:
        return "None"
    if score <= 3.9:
        return "Low"
    if score <= 6.9:
        return "Medium"
    if score <= 8.9:
        return "High"
    return "Critical"


@dataclass(frozen=True)
class CvssVector:
    av: str
    ac: str
    pr: str
    ui: str
    s: str
    c: str
    i: str
    a: str
    e: str = "X"
    rl: str = "X"
    rc: str = "X"
    cr: str = "X"
    ir: str = "X"
    ar: str = "X"
    mav: str = "X"
    mac: str = "X"
    mpr: str = "X"
    mui: str = "X"
    ms: str = "X"
    mc: str = "X"
    mi: str = "X"
    ma: str = "X"

    def metric(self, name: str) -> str:
        return getattr(self, name.lower())

    def to_string(self) -> str:
        """Canonical form: prefix, then every non-default metric in spec order."""
        parts = [PREFIX]
        for name in METRIC_ORDER:
            value = self.metric(name)
            if name in BASE_METRICS or value != "X":
                parts.append(f"{name}:{value}")
        return "/".join(parts)

    def has_temporal(self) -> bool:
        return any(self.metric(m) != "X" for m in TEMPORAL_METRICS)

    def has_environmental(self) -> bool:
        return any(self.metric(m) != "X" for m in ENVIRONMENTAL_METRICS)


@dataclass(frozen=True)
class CvssScore:
    base: float
    temporal: float
    environmental: float
    severity: str

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "temporal": self.temporal,
            "environmental": self.environmental,
            "severity": self.severity,
        }


def parse_vector(text: str) -> CvssVector:
    """Parse "CVSS:3.0/AV:_/..."; order-insensitive after the prefix, strict keys."""
    parts = text.split("/")
    if parts[0] != PREFIX:
        raise MalformedVector(f"vector must start with {PREFIX!r}")
    seen: dict[str, str] = {}
    for part in parts[1:]:
        if ":" not in part:
            raise MalformedVector(f"bad metric component {part!r}")
        name, _, value = part.partition(":")
        if name not in ALLOWED:
            raise MalformedVector(f"unknown metric {name!r}")
        if name in seen:
            raise MalformedVector(f"duplicate metric {name!r}")
        if value not in ALLOWED[name]:
            raise IllegalValue(f"{name}:{value}")
        seen[name] = value
    missing = [m for m in BASE_METRICS if m not in seen]
    if missing:
        raise MissingBaseMetric(", ".join(missing))
    return CvssVector(**{name.lower(): value for name, value in seen.items()})


def _impact_subscore(isc_base: float, scope: str) -> float:
    if scope == "U":
        return 6.42 * isc_base
    return 7.52 * (isc_base - 0.029) - 3.25 * (isc_base - 0.02) ** 15


def _exploitability(av: str, ac: str, pr: str, ui: str, scope: str) -> float:
    return 8.22 * AV_WEIGHT[av] * AC_WEIGHT[ac] * PR_WEIGHT[scope][pr] * UI_WEIGHT[ui]


def base_score(v: CvssVector) -> float:
    isc_base = 1.0 - (1.0 - CIA_WEIGHT[v.c]) * (1.0 - CIA_WEIGHT[v.i]) * (1.0 - CIA_WEIGHT[v.a])
    impact = _impact_subscore(isc_base, v.s)
    if impact <= 0.0:
        return 0.0
    exploitability = _exploitability(v.av, v.ac, v.pr, v.ui, v.s)
    if v.s == "U":
        return roundup(min(impact + exploitability, 10.0))
    return roundup(min(1.08 * (impact + exploitability), 10.0))


def _temporal_multiplier(v: CvssVector) -> float:
    return E_WEIGHT[v.e] * RL_WEIGHT[v.rl] * RC_WEIGHT[v.rc]


def temporal_score(v: CvssVector) -> float:
    return roundup(base_score(v) * _temporal_multiplier(v))


def environmental_score(v: CvssVector) -> float:
    m_av = v.mav if v.mav != "X" else v.av
    m_ac = v.mac if v.mac != "X" else v.ac
    m_pr = v.mpr if v.mpr != "X" else v.pr
    m_ui = v.mui if v.mui != "X" else v.ui
    m_s = v.ms if v.ms != "X" else v.s
    m_c = v.mc if v.mc != "X" else v.c
    m_i = v.mi if v.mi != "X" else v.i
    m_a = v.ma if v.ma != "X" else v.a

    isc_modified = min(
        1.0
        - (1.0 - CIA_WEIGHT[m_c] * REQUIREMENT_WEIGHT[v.cr])
        * (1.0 - CIA_WEIGHT[m_i] * REQUIREMENT_WEIGHT[v.ir])
        * (1.0 - CIA_WEIGHT[m_a] * REQUIREMENT_WEIGHT[v.ar]),
        0.915,
    )
    impact = _impact_subscore(isc_modified, m_s)
    if impact <= 0.0:
        return 0.0
    exploitability = _exploitability(m_av, m_ac, m_pr, m_ui, m_s)
    if m_s == "U":
        modified_base = roundup(min(impact + exploitability, 10.0))
    else:
        modified_base = roundup(min(1.08 * (impact + exploitability), 10.0))
    return roundup(modified_base * _temporal_multiplier(v))


def score(v: CvssVector) -> CvssScore:
    base = base_score(v)
    return CvssScore(
        base=base,
        temporal=temporal_score(v),
        environmental=environmental_score(v),
        severity=severity(base),
    )


def score_string(text: str) -> CvssScore:
    return score(parse_vector(text))
