/**
 * The closed-loop control client: subscribe to world snapshots, run the
 * policy, publish validated control commands stamped with the consumed world
 * timestamp. Exits when the simulator's heartbeat reports the episode ended
 * or goes silent.
 */

import { createClient } from 'redis';
import { KEYS, buildControl, parseActorState, parseHeartbeat } from './messages.js';
import type { Policy } from './policies.js';

export interface ClientConfig {
  host: string;
  port: number;
  password?: string;
  /** control publish ceiling, Hz (world updates may arrive faster) */
  rate: number;
  policy: Policy;
  heartbeatTimeoutMs?: number;
  log?: (line: string) => void;
}

function makeConnection(cfg: ClientConfig) {
  return createClient({
    RESP: 2,
    username: cfg.password !== undefined ? 'av-stack' : undefined,
    password: cfg.password,
    socket: {
      host: cfg.host,
      port: cfg.port,
      reconnectStrategy: (retries: number) => (retries > 5 ? false : 100),
    },
  });
}

export async function controlLoop(cfg: ClientConfig): Promise<{ commands: number }> {
  const log = cfg.log ?? (() => {});
  const heartbeatTimeout = cfg.heartbeatTimeoutMs ?? 5000;
  const minIntervalMs = 1000.0 / cfg.rate;

  const commands = makeConnection(cfg);
  const subscriber = makeConnection(cfg);
  commands.on('error', (err: Error) => log(`connection error: ${err.message}`));
  subscriber.on('error', (err: Error) => log(`subscriber error: ${err.message}`));
  await commands.connect();
  await subscriber.connect();
  // platform identity for the key ownership rule
  try {
    await commands.sendCommand(['AUTH', 'av-stack', cfg.password ?? '']);
  } catch (err) {
    log(`auth: ${String(err)}`);
  }

  let sent = 0;
  let lastSentAt = 0;
  let lastHeartbeat = Date.now();
  let ended = false;

  const step = async (payload: string) => {
    let world;
    try {
      world = parseActorState(payload);
    } catch (err) {
      log(`rejected world payload: ${String(err)}`);
      return; // retry on the next update
    }
    const now = Date.now();
    if (now - lastSentAt < minIntervalMs) return;
    const accel = cfg.policy.decide(world);
    if (accel === null) return;
    const control = buildControl(world.header.timestamp, accel);
    try {
      await commands.set(KEYS.control, control);
      sent += 1;
      lastSentAt = now;
    } catch (err) {
      log(`control rejected: ${String(err)}`);
    }
  };

  await subscriber.subscribe(KEYS.actorInfo, (payload: string) => {
    void step(payload);
  });
  await subscriber.subscribe(KEYS.heartbeat, (payload: string) => {
    lastHeartbeat = Date.now();
    try {
      if (parseHeartbeat(payload).status === 'ended') ended = true;
    } catch {
      // ignore malformed heartbeats; silence is handled by the timeout
    }
  });

  // catch up on a snapshot published before the subscription was live
  const current = await commands.get(KEYS.actorInfo);
  if (current) await step(current);

  log(`control loop running (policy ${cfg.policy.name})`);
  while (!ended && Date.now() - lastHeartbeat < heartbeatTimeout) {
    await new Promise((resolve) => setTimeout(resolve, 50));
  }
  log(ended ? 'episode ended' : 'heartbeat lost');
  await subscriber.unsubscribe();
  await subscriber.destroy();
  await commands.destroy();
  return { commands: sent };
}
