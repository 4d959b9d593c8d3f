#!/usr/bin/env node
/** CLI entry: av-client --server host:port --policy idm --rate 10 */

import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';
import { controlLoop } from './client.js';
import { makePolicy, PolicyName } from './policies.js';

async function main() {
  const argv = await yargs(hideBin(process.argv))
    .option('server', {
      type: 'string',
      default: '127.0.0.1:6379',
      describe: 'co-sim server address host:port',
    })
    .option('policy', {
      choices: ['idm', 'full-stop-on-cutin'] as const,
      default: 'idm' as PolicyName,
      describe: 'driving policy',
    })
    .option('rate', {
      type: 'number',
      default: 10,
      describe: 'control publish ceiling, Hz',
    })
    .option('password', { type: 'string', describe: 'server password' })
    .strict()
    .help()
    .parse();

  if (!(argv.rate > 0)) {
    throw new Error('--rate must be > 0');
  }
  const [host, portRaw] = argv.server.split(':');
  const result = await controlLoop({
    host,
    port: Number(portRaw ?? 6379),
    password: argv.password,
    rate: argv.rate,
    policy: makePolicy(argv.policy),
    log: (line) => console.error(`[av-client] ${line}`),
  });
  console.log(JSON.stringify({ commands: result.commands }));
}

main().catch((err) => {
  console.error(`[av-client] fatal: ${err}`);
  process.exit(1);
});
