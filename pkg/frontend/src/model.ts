// Pure derivations from API payloads to render state. No business rules live
// here: the same responses always produce the same view model.

import type {
  CapabilityView,
  EngineEvent,
  MachineView,
  NodeView,
  NotificationView,
  SessionView,
} from "./api.js";

export type NodeState = "idle" | "active" | "done" | "error";

export interface NodeProgress {
  id: string;
  kind: string;
  name: string;
  entered: number;
  completed: number;
  state: NodeState;
}

export interface InstanceProgress {
  nodes: NodeProgress[];
  currentNodes: string[];
  skillStates: Record<string, string>;
  skillOf: Record<string, string>;
  errors: Array<{ node: string; code: string; message?: string }>;
  caught: Array<{ boundary: string; host: string; code: string }>;
  ended: { status: string; node?: string; code?: string } | null;
}

// Fold the event history onto the deployment's node list. Handing the same
// events in twice must not change the outcome, so reloads stay idempotent.
export function foldEvents(nodes: NodeView[], events: EngineEvent[]): InstanceProgress {
  const byId = new Map<string, NodeProgress>();
  const ordered: NodeProgress[] = nodes.map((node) => {
    const row: NodeProgress = {
      id: node.id,
      kind: node.kind,
      name: node.name,
      entered: 0,
      completed: 0,
      state: "idle",
    };
    byId.set(node.id, row);
    return row;
  });

  const progress: InstanceProgress = {
    nodes: ordered,
    currentNodes: [],
    skillStates: {},
    skillOf: {},
    errors: [],
    caught: [],
    ended: null,
  };

  const erroredNodes = new Set<string>();
  for (const event of events) {
    const p = event.payload;
    switch (event.kind) {
      case "NodeEntered": {
        const row = byId.get(String(p.node));
        if (row) row.entered += 1;
        break;
      }
      case "NodeCompleted": {
        const row = byId.get(String(p.node));
        if (row) row.completed += 1;
        break;
      }
      case "SkillStateObserved": {
        const task = String(p.node);
        progress.skillStates[task] = String(p.state);
        progress.skillOf[task] = String(p.skill);
        break;
      }
      case "ErrorThrown": {
        const node = String(p.node);
        erroredNodes.add(node);
        progress.errors.push({
          node,
          code: String(p.code),
          message: p.message === undefined ? undefined : String(p.message),
        });
        break;
      }
      case "ErrorCaught":
        progress.caught.push({
          boundary: String(p.boundary),
          host: String(p.host),
          code: String(p.code),
        });
        break;
      case "InstanceEnded":
        progress.ended = {
          status: String(p.status),
          node: p.node === undefined ? undefined : String(p.node),
          code: p.code === undefined ? undefined : String(p.code),
        };
        break;
      default:
        break;
    }
  }

  for (const row of ordered) {
    if (erroredNodes.has(row.id)) {
      row.state = "error";
    } else if (row.entered > row.completed) {
      row.state = "active";
      progress.currentNodes.push(row.id);
    } else if (row.completed > 0) {
      row.state = "done";
    }
  }
  return progress;
}

export interface DecisionRow {
  taskId: string;
  taskName: string;
  capability: string;
  candidates: SessionView["pending"][number]["candidates"];
}

export interface BindingRow {
  taskId: string;
  skill: string;
}

export interface ResolutionDialog {
  sessionId: string;
  policy: string;
  complete: boolean;
  decisions: DecisionRow[];
  decided: BindingRow[];
}

export function deriveResolutionDialog(session: SessionView): ResolutionDialog {
  return {
    sessionId: session.sessionId,
    policy: session.policy,
    complete: session.complete,
    decisions: session.pending.map((choice) => ({
      taskId: choice.taskId,
      taskName: choice.taskName,
      capability: choice.capability,
      candidates: choice.candidates,
    })),
    decided: Object.entries(session.plan.bindings).map(([taskId, binding]) => ({
      taskId,
      skill: binding.skill,
    })),
  };
}

export interface RegistryRow {
  machine: string;
  machineName: string;
  skills: Array<{ iri: string; name: string; capability: string }>;
}

export interface RegistryViewModel {
  machines: RegistryRow[];
  capabilities: Array<{ iri: string; name: string; providers: number }>;
}

export function deriveRegistry(
  machines: MachineView[],
  capabilities: CapabilityView[]
): RegistryViewModel {
  const providers = new Map<string, number>();
  for (const machine of machines) {
    for (const skill of machine.skills) {
      providers.set(skill.capability, (providers.get(skill.capability) ?? 0) + 1);
    }
  }
  return {
    machines: machines.map((machine) => ({
      machine: machine.iri,
      machineName: machine.name,
      skills: machine.skills.map((skill) => ({
        iri: skill.iri,
        name: skill.name,
        capability: skill.capability,
      })),
    })),
    capabilities: capabilities.map((capability) => ({
      iri: capability.iri,
      name: capability.name,
      providers: providers.get(capability.iri) ?? 0,
    })),
  };
}

export function newestFirst(records: NotificationView[]): NotificationView[] {
  return [...records].reverse();
}

export function eventLine(event: EngineEvent): string {
  return `${event.seq}  ${event.kind}  ${JSON.stringify(event.payload)}`;
}
