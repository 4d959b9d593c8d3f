import { describe, expect, it } from 'vitest';
import {
  buildControl,
  canonicalJson,
  controlSchema,
  parseActorState,
} from '../src/messages.js';

function world(actors: object[] = []) {
  return JSON.stringify({
    header: { timestamp: 1.5, platform: 'terasim', schema_version: '1.0' },
    actors,
  });
}

const car = {
  id: 'veh_1',
  type: 'CAR',
  x: 1,
  y: 2,
  heading: 0,
  speed: 10,
  accel: 0,
  length: 4.6,
  width: 1.8,
};

describe('message validation', () => {
  it('accepts a valid world snapshot', () => {
    const parsed = parseActorState(world([car]));
    expect(parsed.actors).toHaveLength(1);
  });

  it('rejects a missing field with its path', () => {
    const { heading, ...broken } = car;
    expect(() => parseActorState(world([broken]))).toThrowError(/heading/);
  });

  it('rejects duplicate actor ids', () => {
    expect(() => parseActorState(world([car, { ...car }]))).toThrowError(/duplicate/);
  });

  it('rejects unknown actor types', () => {
    expect(() => parseActorState(world([{ ...car, type: 'BLIMP' }]))).toThrow();
  });

  it('rejects unrecognized schema versions', () => {
    const raw = JSON.stringify({
      header: { timestamp: 0, platform: 'terasim', schema_version: '2.0' },
      actors: [],
    });
    expect(() => parseActorState(raw)).toThrow();
  });

  it('builds canonical validated control messages', () => {
    const payload = buildControl(12.5, -1.25);
    const doc = JSON.parse(payload);
    controlSchema.parse(doc);
    expect(doc.header.timestamp).toBe(12.5);
    expect(doc.command.target_accel).toBe(-1.25);
    // canonical: sorted keys, stable bytes
    expect(payload).toBe(canonicalJson(doc));
    expect(payload.indexOf('"command"')).toBeLessThan(payload.indexOf('"header"'));
  });

  it('rejects mixed command forms', () => {
    expect(() =>
      controlSchema.parse({
        header: { timestamp: 0, platform: 'av-stack', schema_version: '1.0' },
        command: { throttle: 0.5, brake: 0, steering: 0, target_accel: 1 },
      }),
    ).toThrow();
  });
});
