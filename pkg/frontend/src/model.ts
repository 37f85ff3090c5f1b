/**
 * Hand description document as served by the daemon's get_model command.
 * Slider bounds and motor ids are always taken from here, never
 * duplicated in the console.
 */

export interface JointDoc {
  name: string;
  finger: string;
  kind: string;
  rom_min_deg: number;
  rom_max_deg: number;
  motor_id: number;
}

export interface ModelDoc {
  version: number;
  joints: JointDoc[];
}

function isObject(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

export function validateModelDoc(value: unknown): ModelDoc {
  if (!isObject(value) || !Array.isArray(value.joints)) {
    throw new Error("model document must carry a joints list");
  }
  const joints: JointDoc[] = value.joints.map((entry, index) => {
    if (!isObject(entry)) {
      throw new Error(`joint ${index} is not an object`);
    }
    const { name, finger, kind, rom_min_deg, rom_max_deg, motor_id } = entry;
    if (typeof name !== "string" || name === "") {
      throw new Error(`joint ${index} is missing a name`);
    }
    if (
      typeof rom_min_deg !== "number" ||
      typeof rom_max_deg !== "number" ||
      rom_min_deg >= rom_max_deg
    ) {
      throw new Error(`joint ${name} has an invalid range of motion`);
    }
    if (typeof motor_id !== "number") {
      throw new Error(`joint ${name} is missing its motor id`);
    }
    return {
      name,
      finger: String(finger ?? ""),
      kind: String(kind ?? ""),
      rom_min_deg,
      rom_max_deg,
      motor_id,
    };
  });
  return { version: Number(value.version ?? 0), joints };
}

export interface SliderSpec {
  joint: string;
  finger: string;
  min: number;
  max: number;
}

/** One slider per joint; bounds are the model's, passed through untouched. */
export function sliderSpecs(model: ModelDoc): SliderSpec[] {
  return model.joints.map((joint) => ({
    joint: joint.name,
    finger: joint.finger,
    min: joint.rom_min_deg,
    max: joint.rom_max_deg,
  }));
}
