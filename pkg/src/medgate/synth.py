"""Deterministic synthetic patients covering every Safe-Harbor identifier kind.

Stands in for a real medical-records backend: each generated record carries
all 18 identifier categories (so de-identification can be exercised
exhaustively) plus coded diagnoses, procedures, and numeric observations.
Fully reproducible from a seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

FIRST_NAMES = [
    "EMMA", "LIAM", "OLIVIA", "NOAH", "AVA", "ETHAN", "SOFIA", "MASON",
    "ISLA", "LUCAS", "MILA", "HENRY", "ZOE", "OWEN", "RUBY", "CALEB",
]
LAST_NAMES = [
    "JOHNSON", "GARCIA", "CHEN", "PATEL", "OKAFOR", "NAKAMURA", "KOWALSKI",
    "SILVA", "HANSEN", "ROSSI", "DUBOIS", "ALI", "NOVAK", "BERG", "FARRELL",
]
STREETS = ["Maple Street", "Oak Avenue", "Cedar Lane", "Birch Road", "Elm Court"]
CITIES = ["Riverton", "Lakeside", "Fairview", "Greenfield", "Ashford"]
STATES = ["IN", "OH", "IL", "MI", "KY"]

DIAGNOSIS_CODES = ["IBD", "UC", "K50.9", "K51.9", "E11", "I10", "J45", "M54.5"]
PROCEDURE_CODES = ["P-COLO", "P-ENDO", "P-XRAY", "P-LAB"]
OBSERVATION_CODES = ["BP_SYS", "BP_DIA", "HR", "BMI", "A1C"]

GENDERS = ["F", "M", "O"]


@dataclass
class Patient:
    """Plaintext synthetic patient; becomes a clinical record once stored."""

    patient_id: str
    fields: dict


def _patient_fields(rng: random.Random, index: int) -> dict:
    first = rng.choice(FIRST_NAMES)
    last = rng.choice(LAST_NAMES)
    birth_year = rng.randint(1925, 2005)
    birth_date = f"{birth_year:04d}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    admit_year = rng.randint(2018, 2025)
    n_dx = rng.randint(1, 3)
    return {
        "name": f"{first} {last}",
        "birth_date": birth_date,
        "gender": rng.choice(GENDERS),
        "address": f"{rng.randint(10, 999)} {rng.choice(STREETS)}",
        "city": rng.choice(CITIES),
        "state": rng.choice(STATES),
        "zip": f"{rng.randint(46000, 47999)}",
        "phone": f"317-555-{rng.randint(0, 9999):04d}",
        "fax": f"317-556-{rng.randint(0, 9999):04d}",
        "email": f"{first.lower()}.{last.lower()}{index}@example-health.org",
        "ssn": f"{rng.randint(100, 899)}-{rng.randint(10, 99)}-{rng.randint(1000, 9999)}",
        "mrn": f"MRN-{rng.randint(100000, 999999)}",
        "health_plan_id": f"HP-{rng.randint(1000000, 9999999)}",
        "account_number": f"ACCT-{rng.randint(100000, 999999)}",
        "license_number": f"LIC-{rng.randint(10000, 99999)}",
        "vehicle_id": f"1HGCM{rng.randint(10000000000, 99999999999)}",
        "device_id": f"DEV-SN-{rng.randint(10000, 99999)}",
        "url": f"https://portal.example-health.org/p/{rng.randint(1000, 9999)}",
        "ip_address": f"10.{rng.randint(0, 255)}.{rng.randint(0, 255)}.{rng.randint(1, 254)}",
        "biometric_id": f"BIO-{rng.randint(10000, 99999)}",
        "photo_ref": f"IMG-{rng.randint(10000, 99999)}.jpg",
        "other_id": f"STUDY-{rng.randint(1000, 9999)}",
        "admission_date": f"{admit_year:04d}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
        "diagnoses": rng.sample(DIAGNOSIS_CODES, n_dx),
        "procedures": [rng.choice(PROCEDURE_CODES)],
        "observations": [
            {"code": code, "value": round(rng.uniform(40, 200), 1)}
            for code in rng.sample(OBSERVATION_CODES, 3)
        ],
    }


def generate_patients(seed: int, count: int) -> list[Patient]:
    rng = random.Random(seed)
    return [
        Patient(patient_id=f"pt-{i:04d}", fields=_patient_fields(rng, i))
        for i in range(count)
    ]


# Field names whose values identify the patient; used to collect scan markers.
IDENTIFYING_FIELDS = (
    "name", "address", "phone", "fax", "email", "ssn", "mrn",
    "health_plan_id", "account_number", "license_number", "vehicle_id",
    "device_id", "url", "ip_address", "biometric_id", "photo_ref", "other_id",
)


def identifier_markers(patients: Iterable[Patient]) -> set[str]:
    """The plaintext strings that must never appear in persisted artifacts."""
    markers: set[str] = set()
    for p in patients:
        for name in IDENTIFYING_FIELDS:
            markers.add(str(p.fields[name]))
    return markers
