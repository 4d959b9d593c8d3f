/**
 * Wire message schemas and validation for the co-simulation keys.
 *
 * Shapes mirror the published schema documents in ../schemas; every inbound
 * and outbound payload is validated so a corrupted message never propagates.
 */

import { z } from 'zod';

export const SCHEMA_VERSION = '1.0';

export const KEYS = {
  avState: 'av-state-info',
  actorInfo: 'terasim-actor-info',
  sensorInfo: 'physics-sim-sensor-info',
  control: 'av-control-info',
  heartbeat: 'terasim-heartbeat',
} as const;

const header = z.object({
  timestamp: z.number().nonnegative().finite(),
  platform: z.string(),
  schema_version: z.literal(SCHEMA_VERSION),
  weather: z.string().nullish(),
});

export const actorSchema = z.object({
  id: z.string(),
  type: z.enum(['CAR', 'TRUCK', 'CYCLIST', 'PEDESTRIAN', 'AV', 'CONE', 'SIGN']),
  x: z.number().finite(),
  y: z.number().finite(),
  heading: z.number().finite(),
  speed: z.number().finite(),
  accel: z.number().finite(),
  length: z.number().positive(),
  width: z.number().positive(),
});

export const actorStateSchema = z
  .object({
    header,
    actors: z.array(actorSchema),
    signals: z
      .array(z.object({ id: z.string(), state: z.enum(['GREEN', 'YELLOW', 'RED']) }))
      .optional(),
  })
  .superRefine((msg, ctx) => {
    const seen = new Set<string>();
    for (const [i, actor] of msg.actors.entries()) {
      if (seen.has(actor.id)) {
        ctx.addIssue({
          code: 'custom',
          path: ['actors', i, 'id'],
          message: `duplicate actor id ${actor.id}`,
        });
      }
      seen.add(actor.id);
    }
  });

export const controlSchema = z.object({
  header,
  command: z.union([
    z
      .object({
        throttle: z.number().min(0).max(1),
        brake: z.number().min(0).max(1),
        steering: z.number().min(-1).max(1),
      })
      .strict(),
    z
      .object({
        target_accel: z.number().finite(),
        target_lane_offset: z.number().finite(),
      })
      .strict(),
  ]),
});

export const heartbeatSchema = z.object({
  header,
  status: z.enum(['running', 'ended', 'idle']),
});

export type ActorState = z.infer<typeof actorStateSchema>;
export type Actor = z.infer<typeof actorSchema>;
export type ControlMessage = z.infer<typeof controlSchema>;
export type Heartbeat = z.infer<typeof heartbeatSchema>;

export function parseActorState(payload: string): ActorState {
  return actorStateSchema.parse(JSON.parse(payload));
}

export function parseHeartbeat(payload: string): Heartbeat {
  return heartbeatSchema.parse(JSON.parse(payload));
}

/** Canonical JSON: sorted keys, no spaces, so payload bytes are stable. */
export function canonicalJson(value: unknown): string {
  const sort = (v: unknown): unknown => {
    if (Array.isArray(v)) return v.map(sort);
    if (v !== null && typeof v === 'object') {
      const out: Record<string, unknown> = {};
      for (const key of Object.keys(v as Record<string, unknown>).sort()) {
        out[key] = sort((v as Record<string, unknown>)[key]);
      }
      return out;
    }
    return v;
  };
  return JSON.stringify(sort(value));
}

export function buildControl(timestamp: number, targetAccel: number): string {
  const message: ControlMessage = {
    header: {
      timestamp,
      platform: 'av-stack',
      schema_version: SCHEMA_VERSION,
    },
    command: { target_accel: targetAccel, target_lane_offset: 0.0 },
  };
  controlSchema.parse(message); // validate before transmission
  return canonicalJson(message);
}
