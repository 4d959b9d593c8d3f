/**
 * Minimal geometric perception over the shared actor list: find the ego and
 * its nearest leader from world-frame poses alone.
 */

import type { Actor, ActorState } from './messages.js';

export interface LeaderInfo {
  actor: Actor;
  /** bumper-to-bumper distance along the ego's heading, meters */
  gap: number;
}

const LANE_HALF_WIDTH = 2.0; // lateral window for "same lane", meters
const LOOKAHEAD = 150.0;

export function findEgo(world: ActorState): Actor | undefined {
  return world.actors.find((a) => a.type === 'AV');
}

/**
 * Nearest actor ahead of the ego within the lane window. Distances are
 * measured in the ego's heading frame; only forward actors count. A wider
 * halfWidth catches vehicles still straddling lanes mid-merge.
 */
export function findLeader(
  world: ActorState,
  ego: Actor,
  halfWidth: number = LANE_HALF_WIDTH,
): LeaderInfo | null {
  const cos = Math.cos(ego.heading);
  const sin = Math.sin(ego.heading);
  let best: LeaderInfo | null = null;
  for (const actor of world.actors) {
    if (actor.id === ego.id || actor.type === 'SIGN') continue;
    const dx = actor.x - ego.x;
    const dy = actor.y - ego.y;
    const forward = dx * cos + dy * sin;
    const lateral = -dx * sin + dy * cos;
    if (forward <= 0 || forward > LOOKAHEAD) continue;
    if (Math.abs(lateral) > halfWidth) continue;
    const gap = forward - (actor.length + ego.length) / 2.0;
    if (best === null || gap < best.gap) {
      best = { actor, gap };
    }
  }
  return best;
}
