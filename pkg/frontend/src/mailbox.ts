// Mailbox view model: pure state, no DOM. Every behavior here is driven by
// wire frames, so a headless client can replicate any console action.

import {
  DeliverFrame,
  ParsedMessage,
  involvesSystem,
  parseMboxMessage,
  totalTokens,
} from './protocol.js'

export enum ViewMode {
  UserView = 'user',
  FullView = 'full',
}

export interface MailboxEntry {
  offset: number | null
  message: ParsedMessage
  system: boolean
  // token delta vs. the previous token-stamped entry, e.g. "17727 -> 16919"
  tokenAnnotation: string | null
}

export class MailboxView {
  readonly agent: string
  mode: ViewMode = ViewMode.UserView
  entries: MailboxEntry[] = []
  lastTokens: number | null = null

  constructor(agent: string) {
    this.agent = agent
  }

  // Highest journal offset seen; reconnect tails resume from here + 1.
  get lastOffset(): number {
    let max = -1
    for (const e of this.entries) {
      if (e.offset !== null && e.offset > max) max = e.offset
    }
    return max
  }

  ingest(frame: DeliverFrame): MailboxEntry | null {
    const offset = frame['serial-in-journal']
    if (offset !== null && this.entries.some((e) => e.offset === offset)) {
      return null // duplicate after reconnect
    }
    const message = parseMboxMessage(frame.mbox)
    const tokens = totalTokens(message)
    let tokenAnnotation: string | null = null
    if (tokens !== null) {
      if (this.lastTokens !== null && this.lastTokens !== tokens) {
        tokenAnnotation = `${this.lastTokens.toLocaleString()} → ${tokens.toLocaleString()}`
      }
      this.lastTokens = tokens
    }
    const entry: MailboxEntry = {
      offset,
      message,
      system: involvesSystem(message),
      tokenAnnotation,
    }
    this.entries.push(entry)
    this.entries.sort((a, b) => (a.offset ?? Infinity) - (b.offset ?? Infinity))
    return entry
  }

  setMode(mode: ViewMode): void {
    this.mode = mode
  }

  // Journal order is preserved; UserView never contains system traffic.
  visible(): MailboxEntry[] {
    if (this.mode === ViewMode.FullView) return this.entries
    return this.entries.filter((e) => !e.system)
  }

  viewSource(offset: number): string | null {
    const entry = this.entries.find((e) => e.offset === offset)
    return entry ? entry.message.raw : null
  }
}
