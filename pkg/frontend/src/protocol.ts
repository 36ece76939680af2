// Wire frames and mbox helpers. The server is the source of truth for the
// canonical serialization; the console only needs to produce parseable
// messages and to display received bytes without mangling them.

export const SYSTEM_ADDRESS = 'system@localdomain'

export interface HelloFrame {
  type: 'HELLO'
  world: string
  address: string
  'auth-token'?: string
  realm?: string
}

export interface SendFrame {
  type: 'SEND'
  mbox: string
}

export interface DeliverFrame {
  type: 'DELIVER'
  mbox: string
  'serial-in-journal': number | null
}

export interface TailFrame {
  type: 'TAIL'
  agent: string
  'from-offset': number
  'user-view'?: boolean
}

export interface ErrorFrame {
  type: 'ERROR'
  code: string
  detail: string
}

export type Frame = HelloFrame | SendFrame | DeliverFrame | TailFrame | ErrorFrame

export interface ParsedMessage {
  from: string
  to: string[]
  subject: string
  headers: Array<[string, string]>
  body: string
  raw: string // exact mbox text as received (view-source pane)
}

const HEADER_RE = /^([\x21-\x39\x3b-\x7e]+):[ ]?(.*)$/

export function header(msg: ParsedMessage, name: string): string | null {
  const want = name.toLowerCase()
  for (const [k, v] of msg.headers) {
    if (k.toLowerCase() === want) return v
  }
  return null
}

function splitAddresses(value: string): string[] {
  return value.split(',').map((a) => a.trim()).filter((a) => a.length > 0)
}

// Parse one mbox message (envelope line + headers + body) leniently:
// headers end at the first blank or non-header line.
export function parseMboxMessage(raw: string): ParsedMessage {
  const lines = raw.replace(/\r\n/g, '\n').split('\n')
  let i = 0
  if (lines[0]?.startsWith('From ')) i = 1
  const headers: Array<[string, string]> = []
  for (; i < lines.length; i++) {
    const line = lines[i]
    if (line === '') {
      i++
      break
    }
    const m = HEADER_RE.exec(line)
    if (!m) break
    // folded continuation lines
    while (i + 1 < lines.length && /^[ \t]/.test(lines[i + 1])) {
      m[2] += '\n' + lines[++i]
    }
    headers.push([m[1], m[2]])
  }
  const body = lines
    .slice(i)
    .map((l) => (/^>+From /.test(l) ? l.slice(1) : l)) // mboxrd unquote
    .join('\n')
  const msg: ParsedMessage = { from: '', to: [], subject: '', headers, body, raw }
  msg.from = header(msg, 'From') ?? ''
  msg.to = splitAddresses(header(msg, 'To') ?? '')
  msg.subject = header(msg, 'Subject') ?? ''
  return msg
}

// Build a canonical single message for a SEND frame.
export function buildMbox(opts: {
  from: string
  to: string
  subject: string
  body: string
  hint?: string
}): string {
  let body = opts.body
  if (body.length > 0 && !body.endsWith('\n')) body += '\n'
  body = body
    .split('\n')
    .map((l) => (/^>*From /.test(l) ? '>' + l : l)) // mboxrd quote
    .join('\n')
  const headers = [
    `From: ${opts.from}`,
    `To: ${opts.to}`,
    `Subject: ${opts.subject}`,
  ]
  if (opts.hint) headers.push(`X-Hint-Model: ${opts.hint}`)
  const date = 'Thu Jan  1 00:00:00 1970'
  return `From ${opts.from} ${date}\n${headers.join('\n')}\n\n${body}`
}

export function involvesSystem(msg: ParsedMessage): boolean {
  if (msg.from.toLowerCase() === SYSTEM_ADDRESS) return true
  return msg.to.some((a) => a.toLowerCase() === SYSTEM_ADDRESS)
}

export function totalTokens(msg: ParsedMessage): number | null {
  const v = header(msg, 'X-Total-Tokens')
  if (v === null) return null
  const n = parseInt(v, 10)
  return Number.isNaN(n) ? null : n
}
