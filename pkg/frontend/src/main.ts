import { TreeApi } from "./api.js";
import { TreeExplorer } from "./app.js";

const root = document.querySelector<HTMLDivElement>("#app");
if (!root) {
  throw new Error("missing #app element");
}

// Served next to the API or pointed at it with ?server=http://host:port
const server = new URLSearchParams(window.location.search).get("server") ?? "";
const explorer = new TreeExplorer(root, new TreeApi(server));
void explorer.start();
