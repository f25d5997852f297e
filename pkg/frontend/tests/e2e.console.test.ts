// End-to-end smoke: a real service plus four simulated modules, driven only
// through the console DOM. Needs the Python package installed on PATH.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { dirname, join, resolve } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { SkillflowClient } from "../src/api.js";
import { ConsoleApp, mountShell } from "../src/app.js";

const demoDir = resolve(dirname(fileURLToPath(import.meta.url)), "../../demo");
const DRILL_2_SKILL = "urn:demo:skill:drill-module-2:drill";
const DRILL_2_MACHINE = "urn:demo:machine:drill-module-2";

class Managed {
  readonly child: ChildProcess;
  readonly lines: string[] = [];
  stderr = "";
  private waiters: Array<{ test: (line: string) => boolean; resolve: (line: string) => void }> = [];

  constructor(args: string[]) {
    this.child = spawn("skillflow", args, {
      stdio: ["ignore", "pipe", "pipe"],
      env: { ...process.env, PYTHONUNBUFFERED: "1" },
    });
    let pending = "";
    this.child.stdout!.setEncoding("utf8");
    this.child.stdout!.on("data", (chunk: string) => {
      pending += chunk;
      for (;;) {
        const cut = pending.indexOf("\n");
        if (cut < 0) break;
        const line = pending.slice(0, cut);
        pending = pending.slice(cut + 1);
        this.lines.push(line);
        this.waiters = this.waiters.filter((waiter) => {
          if (!waiter.test(line)) return true;
          waiter.resolve(line);
          return false;
        });
      }
    });
    this.child.stderr!.setEncoding("utf8");
    this.child.stderr!.on("data", (chunk: string) => {
      this.stderr += chunk;
    });
  }

  waitForLine(test: (line: string) => boolean, what: string, timeoutMs = 30000): Promise<string> {
    const seen = this.lines.find(test);
    if (seen !== undefined) return Promise.resolve(seen);
    return new Promise((resolveLine, reject) => {
      const timer = setTimeout(() => {
        reject(new Error(`timed out waiting for ${what}\nstdout: ${this.lines.join("\n")}\nstderr: ${this.stderr}`));
      }, timeoutMs);
      this.waiters.push({
        test,
        resolve: (line) => {
          clearTimeout(timer);
          resolveLine(line);
        },
      });
    });
  }

  async shutdown(): Promise<void> {
    if (this.child.exitCode !== null) return;
    this.child.kill("SIGINT");
    await new Promise<void>((done) => {
      const timer = setTimeout(() => {
        this.child.kill("SIGKILL");
        done();
      }, 4000);
      this.child.once("exit", () => {
        clearTimeout(timer);
        done();
      });
    });
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((done) => setTimeout(done, ms));
}

async function waitForDom(check: () => boolean, what: string, timeoutMs = 60000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (check()) return;
    await sleep(100);
  }
  throw new Error(`timed out waiting for ${what}`);
}

let server: Managed | null = null;
let plant: Managed | null = null;
let dataDir = "";
let moduleDir = "";
let serviceUrl = "";
const moduleUrls = new Map<string, string>();
let root: HTMLElement;
let app: ConsoleApp;

function $(selector: string): HTMLElement | null {
  return root.querySelector(selector);
}

function $$(selector: string): HTMLElement[] {
  return Array.from(root.querySelectorAll(selector));
}

function clickOn(selector: string): void {
  const node = $(selector);
  if (!node) throw new Error(`nothing matches ${selector}`);
  (node as HTMLButtonElement).click();
}

async function runToInbox(): Promise<void> {
  clickOn(".deployment-card button.resolve");
  await waitForDom(() => $$(".decision").length === 1, "resolution dialog");
  const pick = $$(".decision button.candidate").find(
    (button) => button.getAttribute("data-skill") === DRILL_2_SKILL
  );
  if (!pick) throw new Error("drill module 2 candidate not offered");
  (pick as HTMLButtonElement).click();
  await waitForDom(
    () => ($("#start-instance") as HTMLButtonElement | null)?.disabled === false,
    "plan complete"
  );
  expect($$(".decision")).toHaveLength(0);
  clickOn("#start-instance");
  await waitForDom(() => $$("form.work-item").length === 1, "work item form");
}

async function submitForm(color: string, holes: string): Promise<void> {
  ($("form.work-item input[name='Color']") as HTMLInputElement).value = color;
  ($("form.work-item input[name='NoOfHoles']") as HTMLInputElement).value = holes;
  clickOn("form.work-item button[type='submit']");
}

beforeAll(async () => {
  dataDir = mkdtempSync(join(tmpdir(), "skillflow-console-data-"));
  moduleDir = mkdtempSync(join(tmpdir(), "skillflow-console-plant-"));

  server = new Managed([
    "serve",
    "--host",
    "127.0.0.1",
    "--port",
    "0",
    "--data-dir",
    dataDir,
    "--registry",
    join(demoDir, "capabilities.json"),
  ]);
  const serving = await server.waitForLine((l) => l.startsWith("serving on "), "service start");
  serviceUrl = serving.slice("serving on ".length).trim();

  // same module fleet as the demo, but on ephemeral ports
  const configs = [
    "supply-module.json",
    "transport-module.json",
    "drill-module-1.json",
    "drill-module-2.json",
  ].map((name) => {
    const doc = JSON.parse(readFileSync(join(demoDir, name), "utf8"));
    delete doc.port;
    const target = join(moduleDir, name);
    writeFileSync(target, JSON.stringify(doc));
    return target;
  });
  plant = new Managed(["--url", serviceUrl, "plant", "up", ...configs, "--register"]);
  await plant.waitForLine((l) => l === "plant is up; Ctrl-C to stop", "plant start");
  for (const line of plant.lines) {
    const hit = /^(\S+) at (http:\/\/\S+)$/.exec(line);
    if (hit) moduleUrls.set(hit[1], hit[2]);
  }

  document.body.innerHTML = '<div id="app"></div>';
  root = document.querySelector("#app") as HTMLElement;
  mountShell(root);
  app = new ConsoleApp(root, new SkillflowClient(serviceUrl));
  await app.refreshAll();
}, 120000);

afterAll(async () => {
  app?.stopWatching();
  await plant?.shutdown();
  await server?.shutdown();
  if (dataDir) rmSync(dataDir, { recursive: true, force: true });
  if (moduleDir) rmSync(moduleDir, { recursive: true, force: true });
}, 30000);

describe("operator console against a live plant", () => {
  it("shows the registered plant", () => {
    expect(moduleUrls.size).toBe(4);
    expect($$(".machine-card")).toHaveLength(4);
    const drillRow = $$("li[data-capability]").find((li) =>
      li.getAttribute("data-capability")?.endsWith("drilling")
    );
    expect(drillRow?.textContent).toContain("2 provider(s)");
  });

  it(
    "deploys, resolves with a picked drill module and runs to completion",
    async () => {
      const xml = readFileSync(join(demoDir, "thermometer.bpmn"), "utf8");
      ($("#deploy-xml") as HTMLTextAreaElement).value = xml;
      clickOn("#deploy-submit");
      await waitForDom(() => $$(".deployment-card").length === 1, "deployment card");

      clickOn(".deployment-card button.resolve");
      await waitForDom(() => $$(".decision").length === 1, "resolution dialog");
      const candidates = $$(".decision[data-task='Activity_drill'] button.candidate");
      expect(candidates).toHaveLength(2);
      const labels = candidates.map((button) => button.textContent ?? "");
      expect(labels.some((text) => text.includes("Drill module 1"))).toBe(true);
      expect(labels.some((text) => text.includes("Drill module 2"))).toBe(true);

      const pick = candidates.find(
        (button) => button.getAttribute("data-skill") === DRILL_2_SKILL
      ) as HTMLButtonElement;
      pick.click();
      await waitForDom(
        () => ($("#start-instance") as HTMLButtonElement | null)?.disabled === false,
        "start enabled"
      );
      expect($$(".decision")).toHaveLength(0);

      clickOn("#start-instance");
      await waitForDom(() => $$("form.work-item").length === 1, "work item form");
      expect($("#board-status")?.textContent).toBe("WaitingUser");
      expect(
        $$("form.work-item input").map((input) => input.getAttribute("name"))
      ).toEqual(["Color", "NoOfHoles"]);

      await submitForm("red", "3");
      await waitForDom(
        () => $("#board-ended")?.textContent?.includes("EndEvent_done") ?? false,
        "nominal completion"
      );
      expect($("#board-ended")?.textContent).toContain("Completed");
      expect($("#board-status")?.textContent).toBe("Completed");

      // the board walks the happy path in model order
      const order = $$("ol.node-list li").map((li) => li.getAttribute("data-node"));
      expect(order.indexOf("Activity_supply")).toBeGreaterThan(-1);
      expect(order.indexOf("Activity_supply")).toBeLessThan(order.indexOf("Activity_transport"));
      expect(order.indexOf("Activity_transport")).toBeLessThan(order.indexOf("Activity_drill"));
      for (const node of [
        "StartEvent_1",
        "Activity_6k239cs",
        "Activity_supply",
        "Activity_transport",
        "Activity_drill",
        "EndEvent_done",
      ]) {
        expect($(`li[data-node='${node}']`)?.className).toContain("node-done");
      }
      expect($("li[data-node='Activity_notify']")?.className).toContain("node-idle");
      expect($("tr[data-variable='Activity_6k239cs_Color']")?.textContent).toContain("red");
      expect(
        $("tr[data-variable='Activity_6k239cs_NoOfHoles']")?.textContent
      ).toContain("3");

      // one poll loop, one delivery per event
      const seqs = app.state.events.map((event) => event.seq);
      expect(new Set(seqs).size).toBe(seqs.length);
      expect($(".event-log")?.textContent).toContain("InstanceEnded");
    },
    120000
  );

  it(
    "routes an injected abort through the error flow into the notification feed",
    async () => {
      const drill2 = moduleUrls.get(DRILL_2_MACHINE);
      expect(drill2).toBeDefined();
      const armed = await fetch(`${drill2}/skills/drill/inject`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ mode: "abort", phase: "duringExecute", oneShot: true }),
      });
      expect(armed.status).toBeLessThan(300);

      await runToInbox();
      await submitForm("blue", "2");
      await waitForDom(
        () => $("#board-ended")?.textContent?.includes("EndEvent_error") ?? false,
        "error route completion"
      );

      expect($("li[data-node='Activity_drill']")?.className).toContain("node-error");
      expect($("li[data-node='Activity_notify']")?.className).toContain("node-done");
      expect($("li[data-node='EndEvent_done']")?.className).toContain("node-idle");
      expect($(".error-caught")?.textContent).toContain("SkillAborted");
      expect($(".event-log")?.textContent).toContain("ErrorCaught");

      await waitForDom(() => $$(".notification").length >= 1, "notification feed");
      const note = $(".notification");
      expect(note?.textContent).toContain("Production error");
      expect(note?.textContent).toContain("blue");
    },
    120000
  );
});
