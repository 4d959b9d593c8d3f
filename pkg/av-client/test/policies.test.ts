import { describe, expect, it } from 'vitest';
import { B_EMERGENCY } from '../src/idm.js';
import type { ActorState } from '../src/messages.js';
import { findEgo, findLeader } from '../src/perception.js';
import { FullStopOnCutinPolicy, IdmFollowPolicy } from '../src/policies.js';

function snapshot(actors: ActorState['actors']): ActorState {
  return {
    header: { timestamp: 0, platform: 'terasim', schema_version: '1.0' },
    actors,
  };
}

function actor(id: string, type: 'AV' | 'CAR', x: number, y = 0, speed = 10): ActorState['actors'][0] {
  return { id, type, x, y, heading: 0, speed, accel: 0, length: 4.6, width: 1.8 };
}

describe('perception', () => {
  it('finds the ego and its nearest forward lane-mate', () => {
    const world = snapshot([
      actor('av', 'AV', 0),
      actor('ahead', 'CAR', 30),
      actor('far', 'CAR', 60),
      actor('behind', 'CAR', -20),
      actor('other-lane', 'CAR', 15, 3.5),
    ]);
    const ego = findEgo(world)!;
    const leader = findLeader(world, ego)!;
    expect(leader.actor.id).toBe('ahead');
    expect(leader.gap).toBeCloseTo(30 - 4.6, 9);
  });

  it('returns null with an empty road', () => {
    const world = snapshot([actor('av', 'AV', 0)]);
    expect(findLeader(world, findEgo(world)!)).toBeNull();
  });
});

describe('policies', () => {
  it('plain following accelerates on a free road below desired speed', () => {
    const policy = new IdmFollowPolicy();
    const world = snapshot([actor('av', 'AV', 0, 0, 5)]);
    expect(policy.decide(world)!).toBeGreaterThan(0);
  });

  it('full-stop policy slams the brakes on a close cut-in', () => {
    const policy = new FullStopOnCutinPolicy();
    const world = snapshot([actor('av', 'AV', 0, 0, 15), actor('cutter', 'CAR', 12, 0, 15)]);
    expect(policy.decide(world)).toBe(-B_EMERGENCY);
  });

  it('full-stop policy recovers cautiously after the alarm', () => {
    const policy = new FullStopOnCutinPolicy();
    policy.decide(snapshot([actor('av', 'AV', 0, 0, 15), actor('cutter', 'CAR', 12, 0, 15)]));
    const after = policy.decide(snapshot([actor('av', 'AV', 0, 0, 0)]));
    expect(after).toBeGreaterThan(0);
    expect(after!).toBeLessThanOrEqual(0.4);
  });

  it('returns null when no ego is present', () => {
    const policy = new IdmFollowPolicy();
    expect(policy.decide(snapshot([actor('x', 'CAR', 0)]))).toBeNull();
  });
});
