// DOM builders for each console panel. Views take data plus callbacks and
// return elements; they never talk to the network themselves.

import type {
  DeploymentSummary,
  InstanceDetail,
  InstanceSummary,
  NotificationView,
  WorkItemView,
} from "./api.js";
import type {
  InstanceProgress,
  RegistryViewModel,
  ResolutionDialog,
} from "./model.js";

type Child = Node | string | null | undefined;

export function el(
  tag: string,
  attrs: Record<string, string> = {},
  ...children: Child[]
): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    if (child === null || child === undefined) continue;
    node.append(child);
  }
  return node;
}

function empty(text: string): HTMLElement {
  return el("div", { class: "empty" }, text);
}

export function renderBanner(message: string | null): HTMLElement | null {
  if (!message) return null;
  return el("div", { class: "banner", role: "alert" }, message);
}

export function renderRegistry(vm: RegistryViewModel): HTMLElement {
  const root = el("div", { class: "registry" });
  const capList = el("ul", { class: "capabilities" });
  for (const capability of vm.capabilities) {
    capList.append(
      el(
        "li",
        { "data-capability": capability.iri },
        `${capability.name} `,
        el("span", { class: "muted" }, `${capability.providers} provider(s)`)
      )
    );
  }
  root.append(el("h3", {}, "Capabilities"), capList);

  const machineList = el("div", { class: "machines" });
  if (vm.machines.length === 0) {
    machineList.append(empty("no machines registered"));
  }
  for (const machine of vm.machines) {
    const skillList = el("ul");
    for (const skill of machine.skills) {
      skillList.append(
        el(
          "li",
          { "data-skill": skill.iri },
          `${skill.name} `,
          el("span", { class: "muted" }, skill.capability)
        )
      );
    }
    machineList.append(
      el(
        "div",
        { class: "machine-card", "data-machine": machine.machine },
        el("strong", {}, machine.machineName),
        el("div", { class: "muted mono" }, machine.machine),
        skillList
      )
    );
  }
  root.append(el("h3", {}, "Machines"), machineList);
  return root;
}

export interface DeploymentHandlers {
  onDeploy: (xml: string) => void;
  onResolve: (deploymentId: string, policy: string) => void;
}

const POLICIES = ["Interactive", "AutoStrict", "FirstDeterministic"];

export function renderDeployments(
  deployments: DeploymentSummary[],
  handlers: DeploymentHandlers
): HTMLElement {
  const root = el("div", { class: "deployments" });

  const xmlInput = el("textarea", {
    id: "deploy-xml",
    placeholder: "paste process XML",
    rows: "5",
  }) as HTMLTextAreaElement;
  const deployButton = el("button", { id: "deploy-submit" }, "Deploy") as HTMLButtonElement;
  deployButton.addEventListener("click", () => handlers.onDeploy(xmlInput.value));
  root.append(el("div", { class: "deploy-form" }, xmlInput, deployButton));

  const list = el("div", { class: "deployment-list" });
  if (deployments.length === 0) {
    list.append(empty("nothing deployed yet"));
  }
  for (const deployment of deployments) {
    const policySelect = el("select", { class: "policy" }) as HTMLSelectElement;
    for (const policy of POLICIES) {
      policySelect.append(el("option", { value: policy }, policy));
    }
    const resolveButton = el("button", { class: "resolve" }, "Resolve") as HTMLButtonElement;
    resolveButton.addEventListener("click", () =>
      handlers.onResolve(deployment.deploymentId, policySelect.value)
    );
    list.append(
      el(
        "div",
        { class: "deployment-card", "data-deployment": deployment.deploymentId },
        el("strong", {}, deployment.name || deployment.processId),
        el("div", { class: "muted mono" }, deployment.deploymentId),
        el("div", { class: "muted" }, `deployed ${deployment.deployedAt}`),
        el("div", { class: "actions" }, policySelect, resolveButton)
      )
    );
  }
  root.append(list);
  return root;
}

export interface ResolutionHandlers {
  onDecide: (taskId: string, skillIri: string) => void;
  onStart: () => void;
  onRefresh: () => void;
}

export function renderResolution(
  dialog: ResolutionDialog | null,
  banner: string | null,
  handlers: ResolutionHandlers
): HTMLElement {
  const root = el("div", { class: "resolution" });
  const bannerNode = renderBanner(banner);
  if (bannerNode) root.append(bannerNode);
  if (!dialog) {
    root.append(empty("no resolution session open"));
    return root;
  }

  root.append(
    el(
      "div",
      { class: "muted" },
      `session ${dialog.sessionId} (${dialog.policy})`
    )
  );

  for (const decision of dialog.decisions) {
    const card = el(
      "div",
      { class: "decision", "data-task": decision.taskId },
      el("strong", {}, decision.taskName || decision.taskId),
      el("div", { class: "muted mono" }, decision.capability)
    );
    for (const candidate of decision.candidates) {
      const pick = el(
        "button",
        { class: "candidate", "data-skill": candidate.skill },
        `${candidate.skillName} @ ${candidate.machineName || candidate.machine}`
      ) as HTMLButtonElement;
      pick.addEventListener("click", () =>
        handlers.onDecide(decision.taskId, candidate.skill)
      );
      card.append(pick);
    }
    root.append(card);
  }

  const decided = el("ul", { class: "decided" });
  for (const binding of dialog.decided) {
    decided.append(
      el("li", { "data-task": binding.taskId }, `${binding.taskId} -> ${binding.skill}`)
    );
  }
  root.append(decided);

  const startButton = el("button", { id: "start-instance" }, "Start instance") as HTMLButtonElement;
  startButton.disabled = !dialog.complete;
  startButton.addEventListener("click", () => handlers.onStart());
  const refreshButton = el("button", { id: "refresh-session" }, "Refresh") as HTMLButtonElement;
  refreshButton.addEventListener("click", () => handlers.onRefresh());
  root.append(el("div", { class: "actions" }, startButton, refreshButton));
  return root;
}

export function renderInstanceList(
  instances: InstanceSummary[],
  selected: string | null,
  onSelect: (instanceId: string) => void
): HTMLElement {
  const root = el("div", { class: "instance-list" });
  if (instances.length === 0) {
    root.append(empty("no instances"));
  }
  for (const instance of instances) {
    const row = el(
      "button",
      {
        class: instance.instanceId === selected ? "instance selected" : "instance",
        "data-instance": instance.instanceId,
      },
      `${instance.instanceId}  `,
      el("span", { class: `status status-${instance.status}` }, instance.status)
    ) as HTMLButtonElement;
    row.addEventListener("click", () => onSelect(instance.instanceId));
    root.append(row);
  }
  return root;
}

export function renderInstanceBoard(
  detail: InstanceDetail | null,
  progress: InstanceProgress | null
): HTMLElement {
  const root = el("div", { class: "instance-board" });
  if (!detail) {
    root.append(empty("select an instance"));
    return root;
  }
  root.append(
    el(
      "div",
      { class: "board-head" },
      el("strong", {}, detail.instanceId),
      " ",
      el("span", { class: `status status-${detail.status}`, id: "board-status" }, detail.status)
    )
  );

  if (progress) {
    const nodeList = el("ol", { class: "node-list" });
    for (const node of progress.nodes) {
      const skillState = progress.skillStates[node.id];
      nodeList.append(
        el(
          "li",
          { class: `node node-${node.state}`, "data-node": node.id },
          el("span", { class: "kind" }, node.kind),
          " ",
          node.name || node.id,
          skillState ? el("span", { class: "skill-state" }, ` [${skillState}]`) : null
        )
      );
    }
    root.append(nodeList);

    for (const caught of progress.caught) {
      root.append(
        el(
          "div",
          { class: "error-caught" },
          `error ${caught.code} on ${caught.host} caught by ${caught.boundary}`
        )
      );
    }
    if (progress.ended) {
      root.append(
        el(
          "div",
          { class: "ended", id: "board-ended" },
          `ended: ${progress.ended.status}` +
            (progress.ended.node ? ` at ${progress.ended.node}` : "")
        )
      );
    }
  }

  const varTable = el("table", { class: "variables" });
  for (const [name, value] of Object.entries(detail.variables)) {
    varTable.append(
      el(
        "tr",
        { "data-variable": name },
        el("td", { class: "mono" }, name),
        el("td", { class: "mono" }, JSON.stringify(value))
      )
    );
  }
  root.append(el("h4", {}, "Variables"), varTable);
  return root;
}

export interface InboxFormState {
  errors: Record<string, string>;
  banner: string | null;
}

export function renderInbox(
  instanceId: string | null,
  workItems: WorkItemView[],
  formState: Record<string, InboxFormState>,
  onSubmit: (taskId: string, raw: Record<string, string>) => void
): HTMLElement {
  const root = el("div", { class: "inbox" });
  if (!instanceId || workItems.length === 0) {
    root.append(empty("no open work items"));
    return root;
  }
  for (const item of workItems) {
    const state = formState[item.taskId] ?? { errors: {}, banner: null };
    const form = el("form", { class: "work-item", "data-task": item.taskId });
    form.append(el("strong", {}, item.taskName || item.taskId));
    const bannerNode = renderBanner(state.banner);
    if (bannerNode) form.append(bannerNode);

    const inputs = new Map<string, HTMLInputElement>();
    for (const field of item.fields) {
      const input = el("input", {
        name: field.name,
        "data-datatype": field.datatype,
        placeholder: field.datatype,
      }) as HTMLInputElement;
      inputs.set(field.name, input);
      const row = el(
        "label",
        { class: "field" },
        `${field.name} (${field.datatype}) `,
        input
      );
      const message = state.errors[field.name];
      if (message) {
        row.append(el("span", { class: "field-error" }, message));
      }
      form.append(row);
    }

    const submit = el("button", { type: "submit" }, "Complete") as HTMLButtonElement;
    form.append(submit);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const raw: Record<string, string> = {};
      for (const [name, input] of inputs.entries()) {
        raw[name] = input.value;
      }
      onSubmit(item.taskId, raw);
    });
    root.append(form);
  }
  return root;
}

export function renderNotifications(records: NotificationView[]): HTMLElement {
  const root = el("div", { class: "notifications" });
  if (records.length === 0) {
    root.append(empty("no notifications"));
    return root;
  }
  for (const record of records) {
    root.append(
      el(
        "div",
        { class: "notification", "data-instance": record.instanceId },
        el("strong", {}, record.subject),
        el("div", {}, record.body),
        el("div", { class: "muted" }, `${record.timestamp}  ${record.instanceId}`)
      )
    );
  }
  return root;
}

export function renderEventLog(lines: string[]): HTMLElement {
  const root = el("pre", { class: "event-log" });
  root.textContent = lines.join("\n");
  return root;
}
