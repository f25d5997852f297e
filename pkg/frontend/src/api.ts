// Typed client for the skillflow HTTP API. The console renders nothing it
// did not get from one of these calls.

export interface PropertyView {
  iri: string;
  name: string;
  datatype: string;
  unit?: string;
  constraint?: { kind: string; [key: string]: unknown };
}

export interface CapabilityView {
  iri: string;
  name: string;
  inputs: PropertyView[];
  outputs: PropertyView[];
}

export interface SkillVariableView {
  name: string;
  datatype: string;
  linkedProperty?: string;
}

export interface SkillView {
  iri: string;
  name: string;
  capability: string;
  parameters: SkillVariableView[];
  results: SkillVariableView[];
  interface: { transport: string; skillId: string; baseUrl?: string };
}

export interface MachineView {
  iri: string;
  name: string;
  skills: SkillView[];
}

export interface DeploymentSummary {
  deploymentId: string;
  processId: string;
  name: string;
  deployedAt: string;
  capabilityTasks: string[];
}

export interface NodeView {
  id: string;
  kind: string;
  name: string;
}

export interface DeploymentDetail extends DeploymentSummary {
  nodes: NodeView[];
}

export interface CandidateView {
  skill: string;
  skillName: string;
  machine: string;
  machineName: string;
}

export interface PendingChoiceView {
  taskId: string;
  taskName: string;
  capability: string;
  candidates: CandidateView[];
}

export interface BindingView {
  skill: string;
  parameters: Record<string, string>;
  outputs: Record<string, string>;
}

export interface SessionView {
  sessionId: string;
  deploymentId: string;
  processId: string;
  policy: string;
  complete: boolean;
  plan: { definitionId: string; bindings: Record<string, BindingView> };
  pending: PendingChoiceView[];
}

export interface InstanceSummary {
  instanceId: string;
  deploymentId: string | null;
  processId: string;
  status: string;
  eventCount: number;
}

export interface FormFieldView {
  name: string;
  datatype: string;
}

export interface WorkItemView {
  taskId: string;
  taskName: string;
  fields: FormFieldView[];
  createdAt: string;
}

export interface InstanceDetail extends InstanceSummary {
  tokens: Record<string, number>;
  variables: Record<string, unknown>;
  skillStates: Record<string, string>;
  workItems: WorkItemView[];
}

export interface EngineEvent {
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
}

export interface EventPage {
  events: EngineEvent[];
  next: number;
}

export interface NotificationView {
  instanceId: string;
  taskId: string;
  subject: string;
  body: string;
  timestamp: string;
}

// Error body the service sends for every non-2xx response.
export class ApiError extends Error {
  status: number;
  errorName: string;
  diagnostics: Array<{ code: string; subject: string; message: string }>;
  candidates: string[];

  constructor(status: number, body: Record<string, unknown>) {
    super(typeof body.message === "string" ? body.message : `HTTP ${status}`);
    this.name = "ApiError";
    this.status = status;
    this.errorName = typeof body.error === "string" ? body.error : "Unknown";
    this.diagnostics = Array.isArray(body.diagnostics)
      ? (body.diagnostics as ApiError["diagnostics"])
      : [];
    this.candidates = Array.isArray(body.candidates)
      ? (body.candidates as string[])
      : [];
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class SkillflowClient {
  baseUrl: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request(
    method: string,
    path: string,
    body?: BodyInit,
    contentType?: string
  ): Promise<unknown> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = body;
      init.headers = { "Content-Type": contentType ?? "application/json" };
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (response.status === 204) {
      return null;
    }
    const text = await response.text();
    let doc: unknown = null;
    try {
      doc = text ? JSON.parse(text) : null;
    } catch {
      doc = null;
    }
    if (!response.ok) {
      const payload =
        doc && typeof doc === "object" ? (doc as Record<string, unknown>) : {};
      throw new ApiError(response.status, payload);
    }
    return doc;
  }

  private get(path: string): Promise<unknown> {
    return this.request("GET", path);
  }

  private post(path: string, body?: unknown): Promise<unknown> {
    return this.request(
      "POST",
      path,
      body === undefined ? undefined : JSON.stringify(body)
    );
  }

  async health(): Promise<boolean> {
    try {
      await this.get("/health");
      return true;
    } catch {
      return false;
    }
  }

  async deploy(xml: string): Promise<DeploymentSummary> {
    return (await this.request(
      "POST",
      "/processes",
      xml,
      "application/xml"
    )) as DeploymentSummary;
  }

  async listDeployments(): Promise<DeploymentSummary[]> {
    const doc = (await this.get("/processes")) as { deployments: DeploymentSummary[] };
    return doc.deployments;
  }

  async getDeployment(deploymentId: string): Promise<DeploymentDetail> {
    return (await this.get(
      `/processes/${encodeURIComponent(deploymentId)}`
    )) as DeploymentDetail;
  }

  async createResolution(deploymentId: string, policy: string): Promise<SessionView> {
    return (await this.post(
      `/processes/${encodeURIComponent(deploymentId)}/resolutions`,
      { policy }
    )) as SessionView;
  }

  async getResolution(sessionId: string): Promise<SessionView> {
    return (await this.get(
      `/resolutions/${encodeURIComponent(sessionId)}`
    )) as SessionView;
  }

  async decide(sessionId: string, taskId: string, skillIri: string): Promise<SessionView> {
    return (await this.post(
      `/resolutions/${encodeURIComponent(sessionId)}/decisions`,
      { taskId, skillIri }
    )) as SessionView;
  }

  async start(
    sessionId: string,
    initialVars?: Record<string, unknown>
  ): Promise<string> {
    const doc = (await this.post("/instances", {
      sessionId,
      initialVars: initialVars ?? {},
    })) as { instanceId: string };
    return doc.instanceId;
  }

  async listInstances(): Promise<InstanceSummary[]> {
    const doc = (await this.get("/instances")) as { instances: InstanceSummary[] };
    return doc.instances;
  }

  async getInstance(instanceId: string): Promise<InstanceDetail> {
    return (await this.get(
      `/instances/${encodeURIComponent(instanceId)}`
    )) as InstanceDetail;
  }

  async events(instanceId: string, since: number, timeoutMs = 0): Promise<EventPage> {
    const query = `since=${since}&timeoutMs=${timeoutMs}`;
    return (await this.get(
      `/instances/${encodeURIComponent(instanceId)}/events?${query}`
    )) as EventPage;
  }

  async completeTask(
    instanceId: string,
    taskId: string,
    values: Record<string, unknown>
  ): Promise<void> {
    await this.post(
      `/instances/${encodeURIComponent(instanceId)}/user-tasks/${encodeURIComponent(taskId)}/complete`,
      { values }
    );
  }

  async cancel(instanceId: string): Promise<void> {
    await this.post(`/instances/${encodeURIComponent(instanceId)}/cancel`);
  }

  async notifications(): Promise<NotificationView[]> {
    const doc = (await this.get("/notifications")) as {
      notifications: NotificationView[];
    };
    return doc.notifications;
  }

  async capabilities(): Promise<CapabilityView[]> {
    const doc = (await this.get("/registry/capabilities")) as {
      capabilities: CapabilityView[];
    };
    return doc.capabilities;
  }

  async machines(): Promise<MachineView[]> {
    const doc = (await this.get("/registry/machines")) as { machines: MachineView[] };
    return doc.machines;
  }
}
