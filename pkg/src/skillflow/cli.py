"""Command line client and server launcher."""

from __future__ import annotations

import json
import signal
import sys
from dataclasses import replace
from pathlib import Path

import click
import httpx

from .config import ServiceConfig, load_config
from .errors import SkillflowError
from .plant import load_module_config, machine_fragment_json, spawn_module
from .registry import SkillInterfaceDescriptor, load_registry
from .service import Service, ServiceServer

PHASE_NAMES = {
    "starting": "duringStarting",
    "execute": "duringExecute",
    "completing": "duringCompleting",
}


def _client() -> httpx.Client:
    # read timeout must outlast the longest server-side poll
    return httpx.Client(timeout=httpx.Timeout(10.0, read=70.0))


def _check(response: httpx.Response) -> dict:
    if response.status_code >= 400:
        try:
            doc = response.json()
            message = f"{doc.get('error')}: {doc.get('message')}"
            if "diagnostics" in doc:
                for d in doc["diagnostics"]:
                    message += f"\n  {d['code']} {d['subject']}: {d['message']}"
        except ValueError:
            message = response.text
        raise click.ClickException(message)
    if response.status_code == 204 or not response.content:
        return {}
    return response.json()


def _parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise click.BadParameter(f"expected name=value, got {text!r}")
    name, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return name, value


@click.group()
@click.option(
    "--url",
    default="http://127.0.0.1:8080",
    envvar="SKILLFLOW_URL",
    show_default=True,
    help="Base URL of the service.",
)
@click.pass_context
def main(ctx: click.Context, url: str) -> None:
    """Operate capability processes against a running service."""
    ctx.obj = url.rstrip("/")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--webhook-url", default=None)
@click.option(
    "--registry",
    "registry_path",
    type=click.Path(exists=True),
    default=None,
    help="Seed registry document, used when the data dir has none yet.",
)
def serve(config_path, host, port, data_dir, webhook_url, registry_path) -> None:
    """Run the HTTP service in the foreground."""
    try:
        config = load_config(config_path)
    except SkillflowError as exc:
        raise click.ClickException(str(exc))
    overrides = {}
    if host is not None:
        overrides["host"] = host
    if port is not None:
        overrides["port"] = port
    if data_dir is not None:
        overrides["data_dir"] = Path(data_dir)
    if webhook_url is not None:
        overrides["webhook_url"] = webhook_url
    if overrides:
        config = replace(config, **overrides)
    registry = None
    if registry_path is not None:
        registry = load_registry(Path(registry_path).read_bytes())
    try:
        service = Service(config, registry=registry)
        server = ServiceServer((config.host, config.port), service)
    except (SkillflowError, OSError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"serving on http://{config.host}:{server.server_address[1]}")
    click.echo(f"data directory: {service.data_dir}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()


@main.command()
@click.argument("file", type=click.Path(exists=True))
@click.pass_obj
def deploy(url: str, file: str) -> None:
    """Upload a process model."""
    with _client() as client:
        doc = _check(client.post(f"{url}/processes", content=Path(file).read_bytes()))
    click.echo(f"deployed {doc['deploymentId']} (process {doc['processId']})")


@main.group()
def registry() -> None:
    """Inspect and edit the machine registry."""


@registry.command("ls")
@click.option("--capabilities", is_flag=True, help="List capabilities instead.")
@click.pass_obj
def registry_ls(url: str, capabilities: bool) -> None:
    with _client() as client:
        if capabilities:
            doc = _check(client.get(f"{url}/registry/capabilities"))
            for cap in doc["capabilities"]:
                click.echo(f"{cap['iri']}  {cap.get('name', '')}")
        else:
            doc = _check(client.get(f"{url}/registry/machines"))
            for machine in doc["machines"]:
                click.echo(f"{machine['iri']}  {machine.get('name', '')}")
                for skill in machine["skills"]:
                    click.echo(f"  {skill['iri']}  -> {skill['capability']}")


@registry.command("add")
@click.argument("file", type=click.Path(exists=True))
@click.pass_obj
def registry_add(url: str, file: str) -> None:
    """Register a machine from a JSON fragment."""
    fragment = json.loads(Path(file).read_text())
    with _client() as client:
        doc = _check(client.post(f"{url}/registry/machines", json=fragment))
    click.echo(f"registered {doc['machine']}")


@registry.command("rm")
@click.argument("iri")
@click.pass_obj
def registry_rm(url: str, iri: str) -> None:
    """Unregister a machine."""
    with _client() as client:
        _check(client.delete(f"{url}/registry/machines/{iri}"))
    click.echo(f"removed {iri}")


@main.command()
@click.argument("deployment")
@click.option("--policy", default=None, help="AutoStrict, FirstDeterministic, Interactive.")
@click.pass_obj
def resolve(url: str, deployment: str, policy: str | None) -> None:
    """Open a resolution session for a deployed process."""
    body = {"policy": policy} if policy else {}
    with _client() as client:
        doc = _check(client.post(f"{url}/processes/{deployment}/resolutions", json=body))
    click.echo(f"session {doc['sessionId']} complete={doc['complete']}")
    for choice in doc["pending"]:
        click.echo(f"  task {choice['taskId']} ({choice['taskName']}) needs a decision:")
        for cand in choice["candidates"]:
            click.echo(f"    {cand['skill']}  on {cand['machineName'] or cand['machine']}")


@main.command()
@click.argument("session")
@click.argument("task")
@click.argument("skill")
@click.pass_obj
def decide(url: str, session: str, task: str, skill: str) -> None:
    """Pick a skill for one pending task."""
    with _client() as client:
        doc = _check(
            client.post(
                f"{url}/resolutions/{session}/decisions",
                json={"taskId": task, "skillIri": skill},
            )
        )
    remaining = len(doc["pending"])
    click.echo(f"session {session} complete={doc['complete']} pending={remaining}")


@main.command()
@click.argument("session")
@click.option("--var", "vars_", multiple=True, help="Initial variable name=value.")
@click.pass_obj
def start(url: str, session: str, vars_: tuple[str, ...]) -> None:
    """Start an instance from a completed resolution session."""
    initial = dict(_parse_assignment(v) for v in vars_)
    with _client() as client:
        doc = _check(
            client.post(
                f"{url}/instances",
                json={"sessionId": session, "initialVars": initial},
            )
        )
    click.echo(doc["instanceId"])


@main.group()
def task() -> None:
    """Work with open user tasks."""


@task.command("complete")
@click.argument("instance")
@click.argument("task_id")
@click.argument("values", nargs=-1)
@click.pass_obj
def task_complete(url: str, instance: str, task_id: str, values: tuple[str, ...]) -> None:
    """Fill a user task's form: name=value pairs."""
    payload = dict(_parse_assignment(v) for v in values)
    with _client() as client:
        _check(
            client.post(
                f"{url}/instances/{instance}/user-tasks/{task_id}/complete",
                json={"values": payload},
            )
        )
    click.echo("completed")


@main.command()
@click.argument("instance")
@click.option("--since", default=0, show_default=True)
@click.pass_obj
def watch(url: str, instance: str, since: int) -> None:
    """Tail an instance's events until it ends."""
    cursor = since
    with _client() as client:
        while True:
            doc = _check(
                client.get(
                    f"{url}/instances/{instance}/events",
                    params={"since": cursor, "timeoutMs": 30000},
                )
            )
            for event in doc["events"]:
                payload = json.dumps(event["payload"], sort_keys=True)
                click.echo(f"{event['seq']:>4}  {event['kind']:<18} {payload}")
                if event["kind"] == "InstanceEnded":
                    return
            cursor = doc["next"]


@main.command()
@click.argument("instance")
@click.pass_obj
def cancel(url: str, instance: str) -> None:
    """Cancel a running instance."""
    with _client() as client:
        _check(client.post(f"{url}/instances/{instance}/cancel"))
    click.echo("cancelled")


@main.group()
def instances() -> None:
    """Inspect instances."""


@instances.command("ls")
@click.pass_obj
def instances_ls(url: str) -> None:
    with _client() as client:
        doc = _check(client.get(f"{url}/instances"))
    for view in doc["instances"]:
        click.echo(
            f"{view['instanceId']}  {view['status']:<12} "
            f"process={view['processId']} events={view['eventCount']}"
        )


@main.group()
def notifications() -> None:
    """Inspect sent notifications."""


@notifications.command("ls")
@click.pass_obj
def notifications_ls(url: str) -> None:
    with _client() as client:
        doc = _check(client.get(f"{url}/notifications"))
    for record in doc["notifications"]:
        click.echo(
            f"{record['timestamp']}  {record['instanceId']}  "
            f"{record['subject']}: {record['body']}"
        )


@main.group()
def plant() -> None:
    """Run and poke simulated machine modules."""


@plant.command("up")
@click.argument("configs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option(
    "--register/--no-register",
    default=False,
    help="Register each module with the service over HTTP.",
)
@click.pass_obj
def plant_up(url: str, configs: tuple[str, ...], register: bool) -> None:
    """Bring up module simulators from config files; Ctrl-C stops them."""
    handles = []
    try:
        for path in configs:
            config = load_module_config(Path(path).read_bytes())
            if config.port is None:
                config = replace(config, port=0)
            handle = spawn_module(config)
            handles.append(handle)
            click.echo(f"{config.machine.iri} at {handle.base_url}")
            if register:
                skills = tuple(
                    replace(
                        s,
                        interface=SkillInterfaceDescriptor(
                            "http", s.interface.skill_id, handle.base_url
                        ),
                    )
                    for s in config.skills
                )
                fragment = machine_fragment_json(config.machine, skills)
                with _client() as client:
                    _check(client.post(f"{url}/registry/machines", json=fragment))
                click.echo(f"  registered with {url}")
        click.echo("plant is up; Ctrl-C to stop")
        signal.pause()
    except KeyboardInterrupt:
        pass
    except SkillflowError as exc:
        raise click.ClickException(str(exc))
    finally:
        for handle in handles:
            handle.close()


@plant.command("inject")
@click.argument("skill_id")
@click.option("--mode", type=click.Choice(["stop", "abort"]), required=True)
@click.option(
    "--phase",
    type=click.Choice(sorted(PHASE_NAMES) + sorted(PHASE_NAMES.values())),
    required=True,
)
@click.option("--sticky", is_flag=True, help="Fire on every pass, not just once.")
@click.option("--plant-url", default="http://127.0.0.1:8093", show_default=True)
def plant_inject(skill_id: str, mode: str, phase: str, sticky: bool, plant_url: str) -> None:
    """Arm a failure on a running module's skill."""
    body = {
        "mode": mode,
        "phase": PHASE_NAMES.get(phase, phase),
        "oneShot": not sticky,
    }
    with _client() as client:
        _check(
            client.post(
                f"{plant_url.rstrip('/')}/skills/{skill_id}/inject", json=body
            )
        )
    click.echo(f"armed {mode} {body['phase']} on {skill_id}")


if __name__ == "__main__":
    main()
