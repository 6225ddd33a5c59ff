// View model: the server manifest plus computed layout.  The manifest is
// the single source of truth; applyManifest replaces node state wholesale
// so the view can never drift from GET /tree.

import type { ManifestJson, NodeJson } from "./api.js";

export interface PlacedNode {
  node: NodeJson;
  depth: number;
  /** leaf-slot column; parents sit at the midpoint of their children */
  x: number;
  y: number;
}

const ROW_HEIGHT = 150;
const COLUMN_WIDTH = 130;

export class TreeViewModel {
  placed = new Map<string, PlacedNode>();
  rootId: string | null = null;
  subject = "";
  selection: string | null = null;
  conditions: string[] = [];
  /** node ids posted by us that the server has not yet shown in /tree */
  optimistic = new Map<string, { parentId: string; condition: string; age: number }>();

  applyManifest(manifest: ManifestJson): void {
    this.subject = manifest.subject_desc;
    const byParent = new Map<string | null, NodeJson[]>();
    for (const node of manifest.nodes) {
      const siblings = byParent.get(node.parent_id) ?? [];
      siblings.push(node);
      byParent.set(node.parent_id, siblings);
    }
    for (const siblings of byParent.values()) {
      // created_at then id: stable positions as later branches append
      siblings.sort((a, b) =>
        a.created_at === b.created_at ? a.id.localeCompare(b.id) : a.created_at < b.created_at ? -1 : 1,
      );
    }
    const roots = byParent.get(null) ?? [];
    this.placed = new Map();
    this.rootId = roots.length === 1 ? roots[0].id : null;
    let nextLeafSlot = 0;
    const place = (node: NodeJson, depth: number): number => {
      const children = byParent.get(node.id) ?? [];
      let x: number;
      if (children.length === 0) {
        x = nextLeafSlot++;
      } else {
        const xs = children.map((child) => place(child, depth + 1));
        x = (Math.min(...xs) + Math.max(...xs)) / 2;
      }
      this.placed.set(node.id, { node, depth, x, y: depth });
      return x;
    };
    if (this.rootId !== null) {
      place(roots[0], 0);
    }
    for (const id of this.placed.keys()) {
      this.optimistic.delete(id); // server truth has caught up
    }
    if (this.selection !== null && !this.placed.has(this.selection) && !this.optimistic.has(this.selection)) {
      this.selection = this.rootId;
    }
  }

  nodesInRenderOrder(): PlacedNode[] {
    return [...this.placed.values()].sort((a, b) => a.depth - b.depth || a.x - b.x);
  }

  edges(): Array<{ from: PlacedNode; to: PlacedNode }> {
    const out: Array<{ from: PlacedNode; to: PlacedNode }> = [];
    for (const placed of this.placed.values()) {
      const parentId = placed.node.parent_id;
      if (parentId !== null) {
        const parent = this.placed.get(parentId);
        if (parent) out.push({ from: parent, to: placed });
      }
    }
    return out;
  }

  pixelPosition(placed: PlacedNode): { left: number; top: number } {
    return { left: 24 + placed.x * COLUMN_WIDTH, top: 24 + placed.y * ROW_HEIGHT };
  }

  canvasSize(): { width: number; height: number } {
    let maxX = 0;
    let maxY = 0;
    for (const placed of this.placed.values()) {
      maxX = Math.max(maxX, placed.x);
      maxY = Math.max(maxY, placed.y);
    }
    return { width: 24 * 2 + (maxX + 1) * COLUMN_WIDTH, height: 24 * 2 + (maxY + 1) * ROW_HEIGHT + 60 };
  }
}

export const AGE_MIN = 20;
export const AGE_MAX = 90;

/** Client-side gate for the branch form; null means acceptable. */
export function validateAge(raw: string): string | null {
  const age = Number(raw);
  if (raw.trim() === "" || Number.isNaN(age)) {
    return "enter a target age";
  }
  if (age < AGE_MIN || age > AGE_MAX) {
    return `target age must be between ${AGE_MIN} and ${AGE_MAX}`;
  }
  return null;
}
