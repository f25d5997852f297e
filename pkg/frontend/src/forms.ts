// Client-side typing of user-task form input. The service rejects wrong
// datatypes anyway; checking here gives field-level messages before the POST.

import type { FormFieldView } from "./api.js";

export type FieldResult =
  | { ok: true; value: string | number | boolean }
  | { ok: false; message: string };

export function parseFieldValue(datatype: string, raw: string): FieldResult {
  const text = raw.trim();
  switch (datatype) {
    case "string":
      return { ok: true, value: raw };
    case "integer": {
      if (!/^[+-]?\d+$/.test(text)) {
        return { ok: false, message: "must be a whole number" };
      }
      const value = Number(text);
      if (!Number.isSafeInteger(value)) {
        return { ok: false, message: "number is too large" };
      }
      return { ok: true, value };
    }
    case "real": {
      if (text === "") {
        return { ok: false, message: "must be a number" };
      }
      const value = Number(text);
      if (!Number.isFinite(value)) {
        return { ok: false, message: "must be a number" };
      }
      return { ok: true, value };
    }
    case "boolean": {
      if (text === "true") return { ok: true, value: true };
      if (text === "false") return { ok: true, value: false };
      return { ok: false, message: "must be true or false" };
    }
    default:
      return { ok: false, message: `unknown datatype ${datatype}` };
  }
}

export interface FormValidation {
  ok: boolean;
  values: Record<string, string | number | boolean>;
  errors: Record<string, string>;
}

export function validateForm(
  fields: FormFieldView[],
  raw: Record<string, string>
): FormValidation {
  const values: FormValidation["values"] = {};
  const errors: FormValidation["errors"] = {};
  for (const field of fields) {
    const text = raw[field.name];
    if (text === undefined || (field.datatype !== "string" && text.trim() === "")) {
      errors[field.name] = "required";
      continue;
    }
    const parsed = parseFieldValue(field.datatype, text);
    if (parsed.ok) {
      values[field.name] = parsed.value;
    } else {
      errors[field.name] = parsed.message;
    }
  }
  return { ok: Object.keys(errors).length === 0, values, errors };
}
