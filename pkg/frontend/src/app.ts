// Controller: one poll loop against GET /tree, branch submission with
// client-side age validation, job watching until a terminal state.

import { ApiError, TreeApi } from "./api.js";
import { TreeViewModel, validateAge } from "./model.js";
import * as view from "./view.js";

export interface ExplorerOptions {
  /** manifest poll period (ms); the service is local, 1s is plenty */
  pollMs?: number;
  /** job status poll period (ms) */
  jobPollMs?: number;
}

export class TreeExplorer {
  readonly model = new TreeViewModel();
  private readonly pollMs: number;
  private readonly jobPollMs: number;
  private timer: ReturnType<typeof setInterval> | null = null;
  private readonly watched = new Set<string>();

  constructor(
    private readonly root: HTMLElement,
    private readonly api: TreeApi,
    options: ExplorerOptions = {},
  ) {
    this.pollMs = options.pollMs ?? 1000;
    this.jobPollMs = options.jobPollMs ?? this.pollMs;
    view.scaffold(root);
    view.bind(root, this.handlers());
  }

  private handlers(): view.Handlers {
    return {
      onSelect: (nodeId) => {
        this.model.selection = nodeId;
        this.render();
      },
      onBranchSubmit: () => {
        void this.submitBranch();
      },
      onDelete: (nodeId) => {
        void this.deleteNode(nodeId);
      },
      onRetry: () => {
        void this.refresh();
      },
    };
  }

  async start(): Promise<void> {
    try {
      this.model.conditions = await this.api.fetchConditions();
      view.renderConditions(this.root, this.model.conditions);
    } catch (error) {
      view.showBanner(this.root, `cannot load conditions: ${describe(error)}`);
    }
    await this.refresh();
    this.timer = setInterval(() => void this.refresh(), this.pollMs);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async refresh(): Promise<void> {
    try {
      const manifest = await this.api.fetchTree();
      if (this.model.selection === null && manifest.nodes.length > 0) {
        this.model.selection = manifest.nodes.find((n) => n.parent_id === null)?.id ?? null;
      }
      this.model.applyManifest(manifest);
      view.hideBanner(this.root);
    } catch (error) {
      view.showBanner(this.root, `cannot reach the tree service: ${describe(error)}`);
      return;
    }
    this.render();
  }

  render(): void {
    view.renderTree(this.root, this.model, this.api, this.handlers());
  }

  async submitBranch(): Promise<void> {
    const ageInput = this.root.querySelector("#age") as HTMLInputElement;
    const conditionSelect = this.root.querySelector("#condition") as HTMLSelectElement;
    const parentId = this.model.selection;
    if (parentId === null) {
      view.setFormError(this.root, "select a parent node first");
      return;
    }
    const ageProblem = validateAge(ageInput.value);
    if (ageProblem !== null) {
      view.setFormError(this.root, ageProblem); // blocked client-side, nothing posted
      return;
    }
    view.setFormError(this.root, "");
    let accepted;
    try {
      accepted = await this.api.createBranch({
        parent_id: parentId,
        condition: conditionSelect.value,
        age_target: Number(ageInput.value),
      });
    } catch (error) {
      view.setFormError(this.root, describe(error)); // server rejection, verbatim
      return;
    }
    this.model.optimistic.set(accepted.node_id, {
      parentId,
      condition: conditionSelect.value,
      age: Number(ageInput.value),
    });
    this.render();
    void this.watchJob(accepted.job_id);
    await this.refresh();
  }

  async watchJob(jobId: string): Promise<void> {
    if (this.watched.has(jobId)) return;
    this.watched.add(jobId);
    try {
      for (;;) {
        const status = await this.api.jobStatus(jobId);
        if (status.state === "done" || status.state === "failed") {
          await this.refresh();
          return;
        }
        await this.refresh();
        await sleep(this.jobPollMs);
      }
    } finally {
      this.watched.delete(jobId);
    }
  }

  async deleteNode(nodeId: string): Promise<void> {
    try {
      await this.api.deleteNode(nodeId);
    } catch (error) {
      view.showBanner(this.root, `delete refused: ${describe(error)}`);
      return;
    }
    await this.refresh();
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return error.message;
  if (error instanceof Error) return error.message;
  return String(error);
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
