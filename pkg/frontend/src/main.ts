import { ExplorerApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "http://127.0.0.1:8008";

const root = document.getElementById("app");
if (root) {
  const app = new ExplorerApp(root, { baseUrl });
  void app.init();
}
