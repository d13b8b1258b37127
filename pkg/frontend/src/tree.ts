/**
 * Tree-document parsing, validation, and routing.
 *
 * The document is the versioned JSON the training library exports. Routing
 * semantics must match it bit for bit: a numeric value goes left iff
 * value < threshold (a value exactly at the threshold goes right); a
 * categorical value goes left iff its level is in the split's subset.
 */

export const SUPPORTED_VERSION = 1;

export type FeatureKind = "numeric" | "binary" | "categorical";

export interface FeatureSpec {
  name: string;
  kind: FeatureKind;
  levels?: string[];
  unit?: string;
  min?: number;
  max?: number;
}

export interface TreatmentRisk {
  count: number;
  historical_rate: number | null;
  mean_estimate: number | null;
}

export interface SplitNode {
  id: number;
  kind: "split";
  feature: string;
  threshold?: number;
  levels?: string[];
  left: number;
  right: number;
}

export interface LeafNode {
  id: number;
  kind: "leaf";
  prescription: string;
  n_train: number;
  stats?: Record<string, TreatmentRisk>;
}

export type TreeNode = SplitNode | LeafNode;

export interface TreeDocument {
  version: number;
  schema: FeatureSpec[];
  treatments: string[];
  root: number;
  nodes: TreeNode[];
}

export class TreeFormatError extends Error {}

export type InputValue = number | string | null | undefined;
export type Inputs = Record<string, InputValue>;

export interface PathStep {
  nodeId: number;
  feature: string;
  condition: string;
  wentLeft: boolean;
}

export interface WalkResult {
  resolved: boolean;
  /** feature blocking resolution, when unresolved */
  awaiting?: string;
  /** split decisions taken so far */
  path: PathStep[];
  prescription?: string;
  leafId?: number;
  nTrain?: number;
  risks?: Record<string, TreatmentRisk>;
  /** non-blocking notices, e.g. values outside the plausible range */
  warnings: string[];
}

function fail(message: string): never {
  throw new TreeFormatError(message);
}

function isObject(x: unknown): x is Record<string, unknown> {
  return typeof x === "object" && x !== null && !Array.isArray(x);
}

export function parseTreeDocument(raw: unknown): TreeDocument {
  const doc = typeof raw === "string" ? parseJson(raw) : raw;
  if (!isObject(doc)) fail("tree document must be a JSON object");
  if (doc.version !== SUPPORTED_VERSION) {
    fail(`unsupported format version ${JSON.stringify(doc.version)}; expected ${SUPPORTED_VERSION}`);
  }
  if (!Array.isArray(doc.schema) || !Array.isArray(doc.treatments) || !Array.isArray(doc.nodes)) {
    fail("tree document needs schema, treatments, and nodes arrays");
  }
  const schema: FeatureSpec[] = doc.schema.map(parseFeature);
  const names = new Set(schema.map((f) => f.name));
  if (names.size !== schema.length) fail("duplicate feature names in schema");

  const treatments = doc.treatments.map((t) => {
    if (typeof t !== "string") fail("treatments must be strings");
    return t;
  });
  if (treatments.length < 2) fail("a tree document needs at least two treatments");

  const featureByName = new Map(schema.map((f) => [f.name, f]));
  const nodes = doc.nodes.map((n) => parseNode(n, featureByName, treatments));
  const ids = new Set<number>();
  for (const node of nodes) {
    if (ids.has(node.id)) fail(`duplicate node id ${node.id}`);
    ids.add(node.id);
  }
  for (const node of nodes) {
    if (node.kind === "split") {
      for (const child of [node.left, node.right]) {
        if (!ids.has(child)) fail(`node ${node.id}: dangling child id ${child}`);
      }
    }
  }
  if (typeof doc.root !== "number" || !ids.has(doc.root)) {
    fail(`dangling root id ${JSON.stringify(doc.root)}`);
  }
  return { version: SUPPORTED_VERSION, schema, treatments, root: doc.root, nodes };
}

function parseJson(text: string): unknown {
  try {
    return JSON.parse(text);
  } catch (e) {
    fail(`invalid JSON: ${(e as Error).message}`);
  }
}

function parseFeature(raw: unknown): FeatureSpec {
  if (!isObject(raw) || typeof raw.name !== "string") fail("malformed schema entry");
  const kind = raw.kind;
  if (kind !== "numeric" && kind !== "binary" && kind !== "categorical") {
    fail(`feature ${raw.name}: unknown kind ${JSON.stringify(kind)}`);
  }
  const spec: FeatureSpec = { name: raw.name, kind };
  if (kind === "categorical") {
    if (!Array.isArray(raw.levels) || raw.levels.length === 0) {
      fail(`feature ${raw.name}: categorical features need levels`);
    }
    spec.levels = raw.levels.map(String);
  }
  if (typeof raw.unit === "string") spec.unit = raw.unit;
  if (typeof raw.min === "number") spec.min = raw.min;
  if (typeof raw.max === "number") spec.max = raw.max;
  return spec;
}

function parseNode(
  raw: unknown,
  featureByName: Map<string, FeatureSpec>,
  treatments: string[],
): TreeNode {
  if (!isObject(raw) || typeof raw.id !== "number") fail("malformed node");
  if (raw.kind === "leaf") {
    if (typeof raw.prescription !== "string" || !treatments.includes(raw.prescription)) {
      fail(`node ${raw.id}: unknown prescription ${JSON.stringify(raw.prescription)}`);
    }
    const leaf: LeafNode = {
      id: raw.id,
      kind: "leaf",
      prescription: raw.prescription,
      n_train: typeof raw.n_train === "number" ? raw.n_train : 0,
    };
    if (isObject(raw.stats)) {
      const stats: Record<string, TreatmentRisk> = {};
      for (const t of treatments) {
        const cell = raw.stats[t];
        if (!isObject(cell)) continue;
        stats[t] = {
          count: typeof cell.count === "number" ? cell.count : 0,
          historical_rate: typeof cell.historical_rate === "number" ? cell.historical_rate : null,
          mean_estimate: typeof cell.mean_estimate === "number" ? cell.mean_estimate : null,
        };
      }
      leaf.stats = stats;
    }
    return leaf;
  }
  if (raw.kind === "split") {
    if (typeof raw.feature !== "string" || !featureByName.has(raw.feature)) {
      fail(`node ${raw.id}: unknown feature ${JSON.stringify(raw.feature)}`);
    }
    if (typeof raw.left !== "number" || typeof raw.right !== "number") {
      fail(`node ${raw.id}: split needs left and right children`);
    }
    const node: SplitNode = {
      id: raw.id,
      kind: "split",
      feature: raw.feature,
      left: raw.left,
      right: raw.right,
    };
    if (Array.isArray(raw.levels)) {
      const spec = featureByName.get(raw.feature)!;
      const known = new Set(spec.levels ?? []);
      node.levels = raw.levels.map(String);
      for (const lv of node.levels) {
        if (!known.has(lv)) fail(`node ${raw.id}: unknown level ${JSON.stringify(lv)}`);
      }
    } else if (typeof raw.threshold === "number") {
      node.threshold = raw.threshold;
    } else {
      fail(`node ${raw.id}: split needs a threshold or levels`);
    }
    return node;
  }
  fail(`node ${raw.id}: unknown kind ${JSON.stringify(raw.kind)}`);
}

export function nodeById(doc: TreeDocument): Map<number, TreeNode> {
  return new Map(doc.nodes.map((n) => [n.id, n]));
}

/** Names of the features the tree actually splits on, in schema order. */
export function usedFeatures(doc: TreeDocument): FeatureSpec[] {
  const used = new Set(
    doc.nodes.filter((n): n is SplitNode => n.kind === "split").map((n) => n.feature),
  );
  return doc.schema.filter((f) => used.has(f.name));
}

function describeCondition(node: SplitNode, spec: FeatureSpec): string {
  if (node.levels !== undefined) {
    return `${node.feature} in {${node.levels.join(", ")}}`;
  }
  const unit = spec.unit ? ` ${spec.unit}` : "";
  return `${node.feature} < ${node.threshold}${unit}`;
}

function missing(value: InputValue): boolean {
  return value === null || value === undefined || (typeof value === "number" && Number.isNaN(value)) || value === "";
}

/**
 * Route the entered values through the tree. Resolution only requires the
 * values on the taken path: a missing feature that only the untaken branch
 * would inspect does not block.
 */
export function walk(doc: TreeDocument, inputs: Inputs): WalkResult {
  const byId = nodeById(doc);
  const specByName = new Map(doc.schema.map((f) => [f.name, f]));
  const path: PathStep[] = [];
  const warnings: string[] = [];
  const warned = new Set<string>();
  const seen = new Set<number>();

  let node = byId.get(doc.root);
  if (node === undefined) throw new TreeFormatError(`dangling root id ${doc.root}`);
  while (node.kind === "split") {
    if (seen.has(node.id)) throw new TreeFormatError(`cycle through node ${node.id}`);
    seen.add(node.id);
    const spec = specByName.get(node.feature)!;
    const value = inputs[node.feature];
    if (missing(value)) {
      return { resolved: false, awaiting: node.feature, path, warnings };
    }
    let wentLeft: boolean;
    if (node.levels !== undefined) {
      wentLeft = node.levels.includes(String(value));
    } else {
      const v = typeof value === "number" ? value : Number(value);
      if (Number.isNaN(v)) {
        return { resolved: false, awaiting: node.feature, path, warnings };
      }
      if (spec.min !== undefined && v < spec.min && !warned.has(node.feature)) {
        warnings.push(`${node.feature} = ${v} is below the plausible minimum ${spec.min}`);
        warned.add(node.feature);
      }
      if (spec.max !== undefined && v > spec.max && !warned.has(node.feature)) {
        warnings.push(`${node.feature} = ${v} is above the plausible maximum ${spec.max}`);
        warned.add(node.feature);
      }
      wentLeft = v < node.threshold!;
    }
    path.push({
      nodeId: node.id,
      feature: node.feature,
      condition: describeCondition(node, spec),
      wentLeft,
    });
    const nextId = wentLeft ? node.left : node.right;
    node = byId.get(nextId);
    if (node === undefined) throw new TreeFormatError(`dangling child id ${nextId}`);
  }
  return {
    resolved: true,
    path,
    warnings,
    prescription: node.prescription,
    leafId: node.id,
    nTrain: node.n_train,
    risks: node.stats,
  };
}
