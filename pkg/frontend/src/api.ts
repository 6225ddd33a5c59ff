// Typed client for the tree service HTTP contract.  The explorer issues
// exactly two kinds of writes: POST /branch and DELETE /node; everything
// else is read-only polling.

export interface NodeJson {
  id: string;
  parent_id: string | null;
  age: number;
  condition: string;
  refined_prompt: string;
  image_ref: string;
  job_state: "pending" | "running" | "done" | "failed";
  created_at: string;
  error?: string | null;
  metrics?: Record<string, number | null> | null;
  [extra: string]: unknown;
}

export interface ManifestJson {
  version: number;
  subject_desc: string;
  backend_id: string;
  nodes: NodeJson[];
  jobs: Record<string, string>;
  [extra: string]: unknown;
}

export interface BranchOverrides {
  seed?: number;
  steps?: number;
  preset?: string;
  key_gain?: number;
  from_root?: boolean;
}

export interface BranchRequest {
  parent_id: string;
  condition: string;
  age_target: number;
  overrides?: BranchOverrides;
}

export interface BranchAccepted {
  job_id: string;
  node_id: string;
}

export interface JobStatus {
  state: "pending" | "running" | "done" | "failed";
  error?: string | null;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

async function readError(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return `${response.status} ${response.statusText}`;
  }
}

export class TreeApi {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.base + path, init);
    if (!response.ok) {
      throw new ApiError(await readError(response), response.status);
    }
    return (await response.json()) as T;
  }

  fetchTree(): Promise<ManifestJson> {
    return this.request<ManifestJson>("/tree");
  }

  async fetchConditions(): Promise<string[]> {
    const body = await this.request<{ conditions: string[] }>("/conditions");
    return body.conditions;
  }

  createBranch(request: BranchRequest): Promise<BranchAccepted> {
    return this.request<BranchAccepted>("/branch", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return this.request<JobStatus>(`/jobs/${jobId}`);
  }

  async deleteNode(nodeId: string): Promise<string[]> {
    const body = await this.request<{ deleted: string[] }>(`/node/${nodeId}`, {
      method: "DELETE",
    });
    return body.deleted;
  }

  imageUrl(nodeId: string): string {
    return `${this.base}/image/${nodeId}`;
  }
}
