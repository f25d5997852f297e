// Console state and wiring. One long-poll loop follows the selected instance;
// every state transition shown to the user comes back from the service first.

import {
  ApiError,
  SkillflowClient,
  type CapabilityView,
  type DeploymentDetail,
  type DeploymentSummary,
  type EngineEvent,
  type InstanceDetail,
  type InstanceSummary,
  type MachineView,
  type NotificationView,
  type SessionView,
} from "./api.js";
import { validateForm } from "./forms.js";
import {
  deriveRegistry,
  deriveResolutionDialog,
  eventLine,
  foldEvents,
  newestFirst,
  type InstanceProgress,
} from "./model.js";
import {
  el,
  renderBanner,
  renderDeployments,
  renderEventLog,
  renderInbox,
  renderInstanceBoard,
  renderInstanceList,
  renderNotifications,
  renderRegistry,
  renderResolution,
  type InboxFormState,
} from "./views.js";

const POLL_TIMEOUT_MS = 15000;
const RETRY_DELAY_MS = 1000;

interface ConsoleState {
  machines: MachineView[];
  capabilities: CapabilityView[];
  deployments: DeploymentSummary[];
  session: SessionView | null;
  resolutionBanner: string | null;
  instances: InstanceSummary[];
  selectedInstance: string | null;
  instanceDetail: InstanceDetail | null;
  events: EngineEvent[];
  cursor: number;
  notifications: NotificationView[];
  inboxForms: Record<string, InboxFormState>;
  globalBanner: string | null;
}

function blankState(): ConsoleState {
  return {
    machines: [],
    capabilities: [],
    deployments: [],
    session: null,
    resolutionBanner: null,
    instances: [],
    selectedInstance: null,
    instanceDetail: null,
    events: [],
    cursor: 0,
    notifications: [],
    inboxForms: {},
    globalBanner: null,
  };
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    let text = `${error.status} ${error.errorName}: ${error.message}`;
    for (const diagnostic of error.diagnostics) {
      text += `; ${diagnostic.code} on ${diagnostic.subject}`;
    }
    return text;
  }
  return String(error);
}

const PANEL_IDS = [
  "registry",
  "deployments",
  "resolution",
  "instances",
  "board",
  "inbox",
  "notifications",
  "events",
] as const;

// Builds the page shell the app mounts into; index.html and the tests share it.
export function mountShell(root: HTMLElement): void {
  root.innerHTML = "";
  root.append(el("div", { id: "global-banner" }));
  const titles: Record<(typeof PANEL_IDS)[number], string> = {
    registry: "Plant registry",
    deployments: "Deployments",
    resolution: "Resolution",
    instances: "Instances",
    board: "Instance board",
    inbox: "Work items",
    notifications: "Notifications",
    events: "Event log",
  };
  for (const id of PANEL_IDS) {
    root.append(
      el(
        "section",
        { class: "panel", id: `panel-${id}` },
        el("h2", {}, titles[id]),
        el("div", { id })
      )
    );
  }
}

export class ConsoleApp {
  client: SkillflowClient;
  state: ConsoleState = blankState();
  private root: HTMLElement;
  private pollGeneration = 0;

  constructor(root: HTMLElement, client: SkillflowClient) {
    this.root = root;
    this.client = client;
  }

  private byId(id: string): HTMLElement {
    const node = this.root.querySelector(`#${id}`);
    if (!node) throw new Error(`missing container #${id}`);
    return node as HTMLElement;
  }

  // -- rendering --

  render(): void {
    const state = this.state;
    const banner = this.byId("global-banner");
    banner.innerHTML = "";
    const bannerNode = renderBanner(state.globalBanner);
    if (bannerNode) banner.append(bannerNode);

    this.replace("registry", renderRegistry(deriveRegistry(state.machines, state.capabilities)));
    this.replace(
      "deployments",
      renderDeployments(state.deployments, {
        onDeploy: (xml) => void this.deploy(xml),
        onResolve: (deploymentId, policy) => void this.resolve(deploymentId, policy),
      })
    );
    this.replace(
      "resolution",
      renderResolution(
        state.session ? deriveResolutionDialog(state.session) : null,
        state.resolutionBanner,
        {
          onDecide: (taskId, skillIri) => void this.decide(taskId, skillIri),
          onStart: () => void this.startInstance(),
          onRefresh: () => void this.refreshSession(),
        }
      )
    );
    this.replace(
      "instances",
      renderInstanceList(state.instances, state.selectedInstance, (instanceId) =>
        void this.selectInstance(instanceId)
      )
    );
    this.replace("board", renderInstanceBoard(state.instanceDetail, this.progress()));
    this.replace(
      "inbox",
      renderInbox(
        state.selectedInstance,
        state.instanceDetail?.workItems ?? [],
        state.inboxForms,
        (taskId, raw) => void this.submitWorkItem(taskId, raw)
      )
    );
    this.replace("notifications", renderNotifications(newestFirst(state.notifications)));
    this.replace("events", renderEventLog(state.events.map(eventLine)));
  }

  private replace(id: string, node: HTMLElement): void {
    const container = this.byId(id);
    container.innerHTML = "";
    container.append(node);
  }

  private deploymentDetails = new Map<string, DeploymentDetail>();

  private progress(): InstanceProgress | null {
    const detail = this.state.instanceDetail;
    if (!detail || !detail.deploymentId) return null;
    const deployment = this.deploymentDetails.get(detail.deploymentId);
    if (!deployment) return null;
    return foldEvents(deployment.nodes, this.state.events);
  }

  private async deploymentDetail(deploymentId: string): Promise<DeploymentDetail> {
    const cached = this.deploymentDetails.get(deploymentId);
    if (cached) return cached;
    const detail = await this.client.getDeployment(deploymentId);
    this.deploymentDetails.set(deploymentId, detail);
    return detail;
  }

  // -- actions --

  async refreshAll(): Promise<void> {
    try {
      const [machines, capabilities, deployments, instances, notifications] =
        await Promise.all([
          this.client.machines(),
          this.client.capabilities(),
          this.client.listDeployments(),
          this.client.listInstances(),
          this.client.notifications(),
        ]);
      this.state.machines = machines;
      this.state.capabilities = capabilities;
      this.state.deployments = deployments;
      this.state.instances = instances;
      this.state.notifications = notifications;
      this.state.globalBanner = null;
    } catch (error) {
      this.state.globalBanner = describe(error);
    }
    this.render();
  }

  async deploy(xml: string): Promise<void> {
    try {
      await this.client.deploy(xml);
      this.state.deployments = await this.client.listDeployments();
      this.state.globalBanner = null;
    } catch (error) {
      this.state.globalBanner = describe(error);
    }
    this.render();
  }

  async resolve(deploymentId: string, policy: string): Promise<void> {
    try {
      this.state.session = await this.client.createResolution(deploymentId, policy);
      this.state.resolutionBanner = null;
      await this.deploymentDetail(deploymentId);
    } catch (error) {
      this.state.session = null;
      this.state.resolutionBanner = describe(error);
    }
    this.render();
  }

  async decide(taskId: string, skillIri: string): Promise<void> {
    const session = this.state.session;
    if (!session) return;
    try {
      this.state.session = await this.client.decide(session.sessionId, taskId, skillIri);
      this.state.resolutionBanner = null;
    } catch (error) {
      this.state.resolutionBanner = describe(error);
      if (error instanceof ApiError && error.status === 409) {
        // decided elsewhere; pull the server's view of the session
        try {
          this.state.session = await this.client.getResolution(session.sessionId);
        } catch {
          this.state.session = null;
        }
      }
    }
    this.render();
  }

  async refreshSession(): Promise<void> {
    const session = this.state.session;
    if (!session) return;
    try {
      this.state.session = await this.client.getResolution(session.sessionId);
      this.state.resolutionBanner = null;
    } catch (error) {
      this.state.resolutionBanner = describe(error);
    }
    this.render();
  }

  async startInstance(): Promise<void> {
    const session = this.state.session;
    if (!session) return;
    try {
      const instanceId = await this.client.start(session.sessionId);
      this.state.session = null;
      this.state.resolutionBanner = null;
      this.state.instances = await this.client.listInstances();
      await this.selectInstance(instanceId);
      return;
    } catch (error) {
      this.state.resolutionBanner = describe(error);
    }
    this.render();
  }

  async selectInstance(instanceId: string): Promise<void> {
    this.state.selectedInstance = instanceId;
    this.state.events = [];
    this.state.cursor = 0;
    this.state.inboxForms = {};
    try {
      this.state.instanceDetail = await this.client.getInstance(instanceId);
      if (this.state.instanceDetail.deploymentId) {
        await this.deploymentDetail(this.state.instanceDetail.deploymentId);
      }
    } catch (error) {
      this.state.instanceDetail = null;
      this.state.globalBanner = describe(error);
    }
    this.render();
    void this.watch(instanceId);
  }

  async submitWorkItem(taskId: string, raw: Record<string, string>): Promise<void> {
    const instanceId = this.state.selectedInstance;
    const item = this.state.instanceDetail?.workItems.find((w) => w.taskId === taskId);
    if (!instanceId || !item) return;
    const validation = validateForm(item.fields, raw);
    if (!validation.ok) {
      this.state.inboxForms[taskId] = { errors: validation.errors, banner: null };
      this.render();
      return;
    }
    try {
      await this.client.completeTask(instanceId, taskId, validation.values);
      delete this.state.inboxForms[taskId];
      this.state.instanceDetail = await this.client.getInstance(instanceId);
    } catch (error) {
      this.state.inboxForms[taskId] = { errors: {}, banner: describe(error) };
    }
    this.render();
  }

  // -- event loop --

  /**
   * Long-poll the selected instance's history. The cursor only moves when a
   * page arrives, so a dropped connection resumes without losing or
   * duplicating events.
   */
  private async watch(instanceId: string): Promise<void> {
    const generation = ++this.pollGeneration;
    while (
      generation === this.pollGeneration &&
      this.state.selectedInstance === instanceId
    ) {
      let page;
      try {
        page = await this.client.events(instanceId, this.state.cursor, POLL_TIMEOUT_MS);
      } catch {
        await sleep(RETRY_DELAY_MS);
        continue;
      }
      if (generation !== this.pollGeneration) return;
      if (page.events.length === 0) continue;
      this.state.events.push(...page.events);
      this.state.cursor = page.next;
      const ended = page.events.some((e) => e.kind === "InstanceEnded");
      try {
        const detail = await this.client.getInstance(instanceId);
        if (generation !== this.pollGeneration) return;
        this.state.instanceDetail = detail;
        if (ended) {
          [this.state.instances, this.state.notifications] = await Promise.all([
            this.client.listInstances(),
            this.client.notifications(),
          ]);
        }
      } catch (error) {
        this.state.globalBanner = describe(error);
      }
      if (generation !== this.pollGeneration) return;
      this.render();
      if (ended) return;
    }
  }

  stopWatching(): void {
    this.pollGeneration += 1;
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
