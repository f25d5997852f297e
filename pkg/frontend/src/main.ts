// Page entry point: pick a service URL, mount the console, load everything.

import { SkillflowClient } from "./api.js";
import { ConsoleApp, mountShell } from "./app.js";

function initialBaseUrl(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("service");
  if (fromQuery) return fromQuery;
  const stored = window.localStorage.getItem("skillflow.service");
  if (stored) return stored;
  return "http://127.0.0.1:8080";
}

function boot(): void {
  const urlInput = document.querySelector("#base-url") as HTMLInputElement;
  const connect = document.querySelector("#connect") as HTMLButtonElement;
  const root = document.querySelector("#app") as HTMLElement;
  urlInput.value = initialBaseUrl();

  let app: ConsoleApp | null = null;
  const start = () => {
    const baseUrl = urlInput.value.trim();
    window.localStorage.setItem("skillflow.service", baseUrl);
    app?.stopWatching();
    mountShell(root);
    app = new ConsoleApp(root, new SkillflowClient(baseUrl));
    void app.refreshAll();
  };
  connect.addEventListener("click", start);
  urlInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") start();
  });
  start();
}

boot();
