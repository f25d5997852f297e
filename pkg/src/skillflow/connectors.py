"""Transport adapters between the engine and skill endpoints.

The engine only ever sees the SkillConnector surface; whether a skill
lives in the same process or behind the HTTP wire is decided by the
interface descriptor on the Skill. Transport trouble surfaces as
SkillUnreachable so the engine can turn it into a catchable process
error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol

import httpx

from .errors import SkillUnreachable, UnknownSkill
from .plant import VirtualModule
from .registry import Skill
from .statemachine import SkillState, TransitionCommand


@dataclass(frozen=True)
class SkillStatus:
    seq: int
    state: SkillState
    outputs: Mapping[str, object]


class SkillConnector(Protocol):
    def set_parameters(self, skill: Skill, values: Mapping[str, object]) -> None: ...

    def command(self, skill: Skill, cmd: TransitionCommand) -> None: ...

    def status(self, skill: Skill) -> SkillStatus: ...

    def wait_events(
        self, skill: Skill, since_seq: int, timeout_s: float
    ) -> list[tuple[int, SkillState]]: ...


class InProcessConnector:
    """Talks to virtual modules living in this process."""

    def __init__(self, modules: Iterable[VirtualModule] = ()) -> None:
        self._hosts: dict[str, VirtualModule] = {}
        for module in modules:
            self.attach(module)

    def attach(self, module: VirtualModule) -> None:
        for skill_id in module.skill_ids():
            self._hosts[skill_id] = module

    def _host(self, skill: Skill) -> VirtualModule:
        module = self._hosts.get(skill.interface.skill_id)
        if module is None:
            raise SkillUnreachable(
                f"no in-process module hosts skill id {skill.interface.skill_id!r}"
            )
        return module

    def set_parameters(self, skill: Skill, values: Mapping[str, object]) -> None:
        self._host(skill).set_parameters(skill.interface.skill_id, values)

    def command(self, skill: Skill, cmd: TransitionCommand) -> None:
        self._host(skill).invoke_transition(skill.interface.skill_id, cmd)

    def status(self, skill: Skill) -> SkillStatus:
        record = self._host(skill).get_state(skill.interface.skill_id)
        return SkillStatus(record.event_seq, record.state, dict(record.outputs))

    def wait_events(
        self, skill: Skill, since_seq: int, timeout_s: float
    ) -> list[tuple[int, SkillState]]:
        return self._host(skill).poll_events(
            skill.interface.skill_id, since_seq, timeout_s
        )


class HttpSkillConnector:
    """Talks to modules over the plant wire protocol."""

    def __init__(self, timeout_s: float = 10.0) -> None:
        self._timeout_s = timeout_s
        self._client = httpx.Client(timeout=timeout_s)

    def close(self) -> None:
        self._client.close()

    def _url(self, skill: Skill, tail: str) -> str:
        base = (skill.interface.base_url or "").rstrip("/")
        if not base:
            raise SkillUnreachable(f"skill {skill.iri} has no base URL")
        return f"{base}/skills/{skill.interface.skill_id}/{tail}"

    def _check(self, skill: Skill, reply: httpx.Response) -> httpx.Response:
        if reply.is_success:
            return reply
        try:
            body = reply.json()
        except ValueError:
            body = {}
        error = body.get("error", "")
        message = body.get("message", reply.text[:200])
        if reply.status_code == 404 and error == "UnknownSkill":
            raise UnknownSkill(skill.interface.skill_id)
        raise SkillUnreachable(
            f"{skill.interface.skill_id}: HTTP {reply.status_code} {error}: {message}"
        )

    def set_parameters(self, skill: Skill, values: Mapping[str, object]) -> None:
        try:
            reply = self._client.put(self._url(skill, "parameters"), json=dict(values))
        except httpx.HTTPError as exc:
            raise SkillUnreachable(str(exc)) from exc
        self._check(skill, reply)

    def command(self, skill: Skill, cmd: TransitionCommand) -> None:
        try:
            reply = self._client.post(
                self._url(skill, f"transitions/{cmd.value.lower()}")
            )
        except httpx.HTTPError as exc:
            raise SkillUnreachable(str(exc)) from exc
        self._check(skill, reply)

    def status(self, skill: Skill) -> SkillStatus:
        try:
            reply = self._client.get(self._url(skill, "state"))
        except httpx.HTTPError as exc:
            raise SkillUnreachable(str(exc)) from exc
        body = self._check(skill, reply).json()
        return SkillStatus(
            int(body["seq"]),
            SkillState.parse(body["state"]),
            dict(body.get("outputs", {})),
        )

    def wait_events(
        self, skill: Skill, since_seq: int, timeout_s: float
    ) -> list[tuple[int, SkillState]]:
        try:
            reply = self._client.get(
                self._url(skill, "events"),
                params={"since": since_seq, "timeoutMs": int(timeout_s * 1000)},
                # the read must outlast the server-side long poll
                timeout=httpx.Timeout(self._timeout_s, read=timeout_s + self._timeout_s),
            )
        except httpx.HTTPError as exc:
            raise SkillUnreachable(str(exc)) from exc
        body = self._check(skill, reply).json()
        return [(int(e["seq"]), SkillState.parse(e["state"])) for e in body]


def connector_for(
    in_process: InProcessConnector, http: HttpSkillConnector, skill: Skill
) -> SkillConnector:
    """Pick the adapter the skill's interface descriptor names."""
    if skill.interface.transport == "http":
        return http
    return in_process


class RoutingConnector:
    """Dispatches each call by the skill's declared transport."""

    def __init__(
        self,
        in_process: InProcessConnector | None = None,
        http: HttpSkillConnector | None = None,
    ) -> None:
        self.in_process = in_process or InProcessConnector()
        self.http = http or HttpSkillConnector()

    def _pick(self, skill: Skill) -> SkillConnector:
        return connector_for(self.in_process, self.http, skill)

    def set_parameters(self, skill: Skill, values: Mapping[str, object]) -> None:
        self._pick(skill).set_parameters(skill, values)

    def command(self, skill: Skill, cmd: TransitionCommand) -> None:
        self._pick(skill).command(skill, cmd)

    def status(self, skill: Skill) -> SkillStatus:
        return self._pick(skill).status(skill)

    def wait_events(
        self, skill: Skill, since_seq: int, timeout_s: float
    ) -> list[tuple[int, SkillState]]:
        return self._pick(skill).wait_events(skill, since_seq, timeout_s)

    def close(self) -> None:
        self.http.close()
