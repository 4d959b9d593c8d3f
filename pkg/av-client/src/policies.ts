/**
 * Driving policies: plain car-following, and a deliberately conservative
 * variant that slams to a stop whenever anything cuts in close ahead and
 * then recovers very cautiously. The second exists to demonstrate how an
 * over-cautious ego invites rear-end collisions.
 */

import { B_EMERGENCY, DEFAULT_PARAMS, DriverParams, idmAccel } from './idm.js';
import type { ActorState } from './messages.js';
import { findEgo, findLeader } from './perception.js';

export type PolicyName = 'idm' | 'full-stop-on-cutin';

export interface Policy {
  name: PolicyName;
  /** target acceleration for this world snapshot, or null if no ego found */
  decide(world: ActorState): number | null;
}

export class IdmFollowPolicy implements Policy {
  name: PolicyName = 'idm';

  constructor(readonly params: DriverParams = { ...DEFAULT_PARAMS, T: 2.0, b: 2.0 }) {}

  decide(world: ActorState): number | null {
    const ego = findEgo(world);
    if (!ego) return null;
    const leader = findLeader(world, ego);
    if (leader === null) {
      return idmAccel(ego.speed, null, 0.0, this.params);
    }
    return idmAccel(ego.speed, leader.gap, leader.actor.speed, this.params);
  }
}

export class FullStopOnCutinPolicy implements Policy {
  name: PolicyName = 'full-stop-on-cutin';
  private alarmed = false;

  constructor(
    readonly cutinGap: number = 12.0,
    readonly recoveryAccel: number = 0.4,
    // threat scan is wider than a lane so a vehicle still straddling the
    // lane boundary mid-merge already counts as a cut-in
    readonly threatHalfWidth: number = 2.8,
    readonly params: DriverParams = { ...DEFAULT_PARAMS, T: 2.5, b: 2.0 },
  ) {}

  decide(world: ActorState): number | null {
    const ego = findEgo(world);
    if (!ego) return null;
    const threat = findLeader(world, ego, this.threatHalfWidth);
    if (threat !== null && threat.gap < this.cutinGap) {
      this.alarmed = true;
      return -B_EMERGENCY; // hard stop, hold while the intruder is close
    }
    const leader = findLeader(world, ego);
    const following = idmAccel(
      ego.speed,
      leader === null ? null : leader.gap,
      leader === null ? 0.0 : leader.actor.speed,
      this.params,
    );
    if (this.alarmed) {
      // creep back up instead of resuming briskly
      return Math.min(following, this.recoveryAccel);
    }
    return following;
  }
}

export function makePolicy(name: PolicyName): Policy {
  return name === 'idm' ? new IdmFollowPolicy() : new FullStopOnCutinPolicy();
}
