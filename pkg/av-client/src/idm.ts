/**
 * Car-following acceleration model, implemented from the math alone.
 *
 * This file deliberately shares no code with the simulator; agreement is
 * checked against the repository's conformance vectors to 1e-9.
 */

export interface DriverParams {
  v0: number; // desired speed, m/s
  aMax: number; // maximum acceleration, m/s^2
  b: number; // comfortable deceleration, m/s^2
  s0: number; // minimum bumper gap, m
  T: number; // desired time headway, s
  delta: number; // free-acceleration exponent
}

export const B_EMERGENCY = 8.0;

export const DEFAULT_PARAMS: DriverParams = {
  v0: 30.0,
  aMax: 2.0,
  b: 3.0,
  s0: 2.0,
  T: 1.5,
  delta: 4.0,
};

/**
 * Acceleration command for an ego at `speed` with an optional leader at
 * bumper gap `gap` moving at `leadSpeed`. A missing gap means free road; a
 * non-positive gap with a leader present commands full emergency braking.
 */
export function idmAccel(
  speed: number,
  gap: number | null,
  leadSpeed: number,
  params: DriverParams = DEFAULT_PARAMS,
  bEmergency: number = B_EMERGENCY,
): number {
  const free = 1.0 - Math.pow(speed / params.v0, params.delta);
  let accel: number;
  if (gap === null || !Number.isFinite(gap)) {
    accel = params.aMax * free;
  } else {
    if (gap <= 0.0) {
      return -bEmergency;
    }
    const sStar =
      params.s0 +
      speed * params.T +
      (speed * (speed - leadSpeed)) / (2.0 * Math.sqrt(params.aMax * params.b));
    accel = params.aMax * (free - Math.pow(sStar / gap, 2));
  }
  if (accel < -bEmergency) return -bEmergency;
  if (accel > params.aMax) return params.aMax;
  return accel;
}
