/**
 * Form model: which inputs to render for a loaded tree document.
 *
 * Only the features the tree splits on get inputs; a depth-0 tree yields an
 * empty field list plus its fixed prescription.
 */

import { FeatureSpec, TreeDocument, nodeById, usedFeatures } from "./tree.js";

export type FieldControl = "toggle" | "number" | "select";

export interface FormField {
  name: string;
  label: string;
  control: FieldControl;
  unit?: string;
  levels?: string[];
  min?: number;
  max?: number;
}

export interface FormModel {
  fields: FormField[];
  treatments: string[];
  /** present only when the tree never splits */
  fixedPrescription?: string;
}

function titleCase(name: string): string {
  return name
    .split("_")
    .map((w) => (w.length > 0 ? w[0]!.toUpperCase() + w.slice(1) : w))
    .join(" ");
}

function controlFor(spec: FeatureSpec): FieldControl {
  if (spec.kind === "binary") return "toggle";
  if (spec.kind === "categorical") return "select";
  return "number";
}

export function buildFormModel(doc: TreeDocument): FormModel {
  const fields = usedFeatures(doc).map((spec) => {
    const field: FormField = {
      name: spec.name,
      label: titleCase(spec.name),
      control: controlFor(spec),
    };
    if (spec.unit !== undefined) field.unit = spec.unit;
    if (spec.levels !== undefined) field.levels = [...spec.levels];
    if (spec.min !== undefined) field.min = spec.min;
    if (spec.max !== undefined) field.max = spec.max;
    return field;
  });
  const model: FormModel = { fields, treatments: [...doc.treatments] };
  if (fields.length === 0) {
    const root = nodeById(doc).get(doc.root)!;
    if (root.kind === "leaf") {
      model.fixedPrescription = root.prescription;
    }
  }
  return model;
}
