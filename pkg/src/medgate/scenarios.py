"""Scenario suites: ordered workflow steps executed through the public endpoints.

A suite is a TOML file of steps, each naming a workflow kind, an actor, the
expected outcome (allow, deny, or detect-tamper), and a CVSS annotation for
the surface under test.  The runner drives a live service over its socket
client, including the adversarial variants: impostor logins, wrong-role
access, junk-request bursts against the rate limiter, direct tampering with
audit bytes and transfer envelopes.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cvss
from .audit import AuditLog
from .biocapsule import synth_sample
from .config import GatewayConfig
from .gateway import INTEGRITY_ERRORS, SECURITY_ERRORS
from .service import GatewayClient

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STEP_KINDS = (
    "login",
    "access_control",
    "access_data",
    "create_compute",
    "update",
    "upload",
    "network_transfer",
)
EXPECTED_OUTCOMES = ("allow", "deny", "detect-tamper")


class ScenarioConfigError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioStep:
    kind: str
    actor: str
    expected: str
    inputs: dict
    cvss_vector: str | None = None


@dataclass(frozen=True)
class ScenarioSuite:
    name: str
    steps: tuple[ScenarioStep, ...]


@dataclass
class StepResult:
    index: int
    kind: str
    actor: str
    expected: str
    outcome: str
    passed: bool
    detail: str
    cvss_vector: str | None = None
    cvss_base: float | None = None
    cvss_severity: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "actor": self.actor,
            "expected": self.expected,
            "outcome": self.outcome,
            "passed": self.passed,
            "detail": self.detail,
            "cvss_vector": self.cvss_vector,
            "cvss_base": self.cvss_base,
            "cvss_severity": self.cvss_severity,
        }


@dataclass
class ScenarioReport:
    suite: str
    results: list[StepResult] = field(default_factory=list)

    @property
    def passed(self) -> int:
        return sum(1 for r in self.results if r.passed)

    @property
    def failed(self) -> int:
        return sum(1 for r in self.results if not r.passed)

    def all_passed(self) -> bool:
        return self.failed == 0

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "steps": [r.to_dict() for r in self.results],
            "passed": self.passed,
            "failed": self.failed,
        }

    def summary(self) -> str:
        return f"suite {self.suite}: {self.passed}/{len(self.results)} steps passed"


def load_suite(path: str | Path) -> ScenarioSuite:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioConfigError(f"suite file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioConfigError(f"bad suite file {path}: {exc}") from None
    name = doc.get("name")
    if not isinstance(name, str):
        raise ScenarioConfigError("suite must carry a string 'name'")
    steps = []
    for i, raw in enumerate(doc.get("steps", [])):
        kind = raw.get("kind")
        if kind not in STEP_KINDS:
            raise ScenarioConfigError(f"step {i}: unknown kind {kind!r}")
        expected = raw.get("expected")
        if expected not in EXPECTED_OUTCOMES:
            raise ScenarioConfigError(f"step {i}: unknown expected outcome {expected!r}")
        actor = raw.get("actor")
        if not isinstance(actor, str):
            raise ScenarioConfigError(f"step {i}: missing actor")
        vector = raw.get("cvss")
        if vector is not None:
            try:
                cvss.parse_vector(vector)
            except cvss.CvssError as exc:
                raise ScenarioConfigError(f"step {i}: bad cvss annotation: {exc}") from None
        steps.append(
            ScenarioStep(
                kind=kind,
                actor=actor,
                expected=expected,
                inputs=dict(raw.get("inputs", {})),
                cvss_vector=vector,
            )
        )
    return ScenarioSuite(name=name, steps=tuple(steps))


def _classify(response: dict) -> str:
    if response.get("ok"):
        return "allow"
    error = response.get("error", "")
    if error in SECURITY_ERRORS:
        return "deny"
    if error in INTEGRITY_ERRORS:
        return "detect-tamper"
    return "error"


class ScenarioRunner:
    """Executes one suite against a running service seeded with a fixture."""

    def __init__(self, client: GatewayClient, config: GatewayConfig, manifest: dict):
        self.client = client
        self.config = config
        self.manifest = manifest
        self.tokens: dict[str, str] = {}
        self.last_cohort: dict[str, str] = {}
        self._draw = 1000  # fresh sample draws, distinct from enrollment draws

    # -- helpers ------------------------------------------------------------------

    def _sample_for(self, user: str) -> list[float]:
        info = self.manifest["users"].get(user)
        if info is None:
            raise ScenarioConfigError(f"unknown actor {user!r}")
        self._draw += 1
        vec = synth_sample(info["seed"], self.manifest["sigma"], draw=self._draw, dim=self.manifest["dim"])
        return [float(x) for x in vec]

    def _login(self, user: str, role: str | None = None) -> dict:
        info = self.manifest["users"].get(user)
        if info is None:
            raise ScenarioConfigError(f"unknown actor {user!r}")
        role = role or info["roles"][0]
        response = self.client.request("login", user=user, role=role, sample=self._sample_for(user))
        if response.get("ok"):
            self.tokens[user] = response["token"]
        return response

    def _token(self, user: str) -> str:
        if user not in self.tokens:
            # Setup logins share the anonymous rate bucket; back off politely if
            # an earlier availability probe drained it.
            for _ in range(50):
                response = self._login(user)
                if response.get("ok") or response.get("error") != "RateLimited":
                    break
                time.sleep(0.1)
            if not response.get("ok"):
                raise ScenarioConfigError(f"setup login failed for {user}: {response.get('message')}")
        return self.tokens[user]

    def _record_id(self, inputs: dict) -> str:
        if "record_id" in inputs:
            return inputs["record_id"]
        index = inputs.get("record_index", 0)
        try:
            return self.manifest["records"][index]
        except IndexError:
            raise ScenarioConfigError(f"record_index {index} out of range") from None

    # -- step executors ---------------------------------------------------------------

    def _run_login(self, step: ScenarioStep) -> tuple[str, str]:
        role = step.inputs.get("role")
        sample_from = step.inputs.get("sample_from")
        if sample_from:  # impostor: someone else's biometrics against this account
            response = self.client.request(
                "login", user=step.actor, role=role, sample=self._sample_for(sample_from)
            )
        else:
            response = self._login(step.actor, role)
        return _classify(response), response.get("message", "logged in")

    def _run_access_control(self, step: ScenarioStep) -> tuple[str, str]:
        action = step.inputs.get("action")
        params = dict(step.inputs.get("params", {}))
        response = self.client.request(f"admin/{action}", token=self._token(step.actor), **params)
        return _classify(response), response.get("message", f"admin/{action} ok")

    def _run_access_data(self, step: ScenarioStep) -> tuple[str, str]:
        token = self._token(step.actor)
        record_id = self._record_id(step.inputs)
        burst = int(step.inputs.get("burst", 0))
        if burst:
            # Availability probe: junk requests interleaved with legitimate
            # reads; the legitimate principal's bucket must stay unaffected.
            denied = 0
            chunk = max(burst // 4, 1)
            sent = 0
            while sent < burst:
                for _ in range(min(chunk, burst - sent)):
                    junk = self.client.request("record/get", token="junk", record_id="x")
                    if not junk.get("ok"):
                        denied += 1
                sent += chunk
                legit = self.client.request("record/get", token=token, record_id=record_id)
                if not legit.get("ok"):
                    return _classify(legit), f"legitimate read starved after {sent} junk requests"
            return "allow", f"burst={burst} junk denied={denied}; legitimate reads unaffected"
        response = self.client.request("record/get", token=token, record_id=record_id)
        return _classify(response), response.get("message", "record read")

    def _run_create_compute(self, step: ScenarioStep) -> tuple[str, str]:
        token = self._token(step.actor)
        action = step.inputs.get("action", "cohort")
        if action == "cohort":
            response = self.client.request(
                "cohort/query",
                token=token,
                codes=list(step.inputs.get("codes", [])),
                description=step.inputs.get("description", ""),
            )
            if response.get("ok"):
                self.last_cohort[step.actor] = response["cohort_id"]
                return "allow", f"cohort {response['cohort_id']} size={response['size']}"
            return _classify(response), response.get("message", "")
        cohort_id = step.inputs.get("cohort_id") or self.last_cohort.get(step.actor)
        if not cohort_id:
            raise ScenarioConfigError(f"step needs a cohort created earlier by {step.actor}")
        if action == "report":
            response = self.client.request(
                "cohort/report",
                token=token,
                cohort_id=cohort_id,
                dimensions=step.inputs.get("dimensions", "age_gender"),
                as_of=step.inputs.get("as_of"),
            )
            if response.get("ok"):
                rows = response["report"]["rows"]
                total = sum(r["count"] for r in rows)
                if total != response["report"]["total"]:
                    return "error", "report counts do not partition the cohort"
                return "allow", f"report rows={len(rows)} total={total}"
            return _classify(response), response.get("message", "")
        if action == "export":
            response = self.client.request(
                "cohort/export", token=token, cohort_id=cohort_id, as_of=step.inputs.get("as_of")
            )
            if response.get("ok"):
                exports = self.config.store_path / "exports"
                exports.mkdir(parents=True, exist_ok=True)
                out = exports / f"{cohort_id}.xml"
                out.write_text(response["document"])
                return "allow", f"export written to {out.name}"
            return _classify(response), response.get("message", "")
        raise ScenarioConfigError(f"unknown create_compute action {action!r}")

    def _run_update(self, step: ScenarioStep) -> tuple[str, str]:
        token = self._token(step.actor)
        record_id = self._record_id(step.inputs)
        got = self.client.request("record/get", token=token, record_id=record_id)
        if not got.get("ok"):
            return _classify(got), got.get("message", "")
        record = got["record"]
        record["fields"].setdefault("diagnoses", []).append(step.inputs.get("add_diagnosis", "I10"))
        put = self.client.request("record/put", token=token, record=record)
        if not put.get("ok"):
            return _classify(put), put.get("message", "")
        detail = f"updated {record_id}"

        if step.inputs.get("tamper_audit"):
            # No endpoint can rewrite audit entries; prove it, then show that
            # direct file tampering is caught by the hash chain (on a copy).
            rewrite = self.client.request(
                "audit/rewrite", token=token, index=0, actor=step.inputs.get("blame", "rn1")
            )
            if rewrite.get("ok"):
                return "error", "audit rewrite endpoint unexpectedly exists"
            audit_path = self.config.store_path / "audit.jsonl"
            tampered = self.config.store_path / "tamper-probe.audit.jsonl"
            raw = bytearray(audit_path.read_bytes())
            target = raw.find(step.actor.encode())
            raw[target if target >= 0 else 0] ^= 0x01
            tampered.write_bytes(bytes(raw))
            verdict = AuditLog.verify_file(tampered)
            tampered.unlink()
            if verdict.valid:
                return "error", "tampered audit copy still verifies"
            return (
                "detect-tamper",
                detail + f"; no rewrite endpoint ({rewrite.get('error')}); "
                f"file tamper detected at entry {verdict.first_bad_index} ({verdict.reason})",
            )

        if step.inputs.get("verify_provenance", True):
            admin = self._token("admin")
            verdict = self.client.request("prov/chain", token=admin, data_ref=record_id)
            if not (verdict.get("ok") and verdict["verdict"]["valid"]):
                return "error", f"provenance chain invalid after update: {verdict}"
            detail += "; provenance chain verifies"
        return "allow", detail

    def _run_upload(self, step: ScenarioStep) -> tuple[str, str]:
        token = self._token(step.actor)
        record = dict(step.inputs.get("record", {}))
        record.setdefault("attending", [])
        record.setdefault("fields", {})
        response = self.client.request("record/put", token=token, record=record)
        if response.get("ok"):
            return "allow", f"uploaded {response['record_id']}"
        return _classify(response), response.get("message", "")

    def _run_network_transfer(self, step: ScenarioStep) -> tuple[str, str]:
        token = self._token(step.actor)
        receiver = step.inputs.get("receiver")
        record_id = self._record_id(step.inputs)
        sent = self.client.request("transfer/send", token=token, record_id=record_id, receiver=receiver)
        if not sent.get("ok"):
            return _classify(sent), sent.get("message", "")
        envelope = sent["envelope"]
        if step.inputs.get("tamper"):
            import base64

            payload = bytearray(base64.b64decode(envelope["payload"]))
            payload[len(payload) // 2] ^= 0x01
            envelope = {**envelope, "payload": base64.b64encode(bytes(payload)).decode()}
        received = self.client.request(
            "transfer/receive",
            token=self._token(receiver),
            envelope=envelope,
            data_node=sent["data_node"],
        )
        outcome = _classify(received)
        if outcome == "allow":
            return "allow", f"transferred {record_id} to {receiver}"
        return outcome, received.get("message", "")

    # -- driver --------------------------------------------------------------------------

    def run(self, suite: ScenarioSuite) -> ScenarioReport:
        # Log every referenced principal in before any rate-limit burst steps
        # drain the shared anonymous bucket.
        actors = {"admin"} | {s.actor for s in suite.steps}
        actors |= {s.inputs["receiver"] for s in suite.steps if "receiver" in s.inputs}
        for actor in sorted(actors):
            if actor in self.manifest["users"]:
                self._token(actor)

        executors = {
            "login": self._run_login,
            "access_control": self._run_access_control,
            "access_data": self._run_access_data,
            "create_compute": self._run_create_compute,
            "update": self._run_update,
            "upload": self._run_upload,
            "network_transfer": self._run_network_transfer,
        }
        report = ScenarioReport(suite=suite.name)
        for i, step in enumerate(suite.steps):
            try:
                outcome, detail = executors[step.kind](step)
            except ScenarioConfigError:
                raise
            except Exception as exc:  # a crashed step fails, it does not abort the suite
                outcome, detail = "error", f"{type(exc).__name__}: {exc}"
            result = StepResult(
                index=i,
                kind=step.kind,
                actor=step.actor,
                expected=step.expected,
                outcome=outcome,
                passed=outcome == step.expected,
                detail=detail,
                cvss_vector=step.cvss_vector,
            )
            if step.cvss_vector:
                annotated = cvss.score_string(step.cvss_vector)
                result.cvss_base = annotated.base
                result.cvss_severity = annotated.severity
            report.results.append(result)
        return report


def run_suite_file(
    path: str | Path,
    client: GatewayClient,
    config: GatewayConfig,
    manifest: dict,
    report_dir: str | Path | None = None,
) -> ScenarioReport:
    suite = load_suite(path)
    report = ScenarioRunner(client, config, manifest).run(suite)
    report_dir = Path(report_dir) if report_dir else config.store_path / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / f"{suite.name}-report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
