// One WebSocket connection per session; a single dispatch loop feeds the
// mailboxes. The WebSocket constructor is injectable so the same code runs
// in the browser and under node (ws package) in tests.

import { MailboxView } from './mailbox.js'
import { DeliverFrame, ErrorFrame, Frame, buildMbox } from './protocol.js'

export interface WebSocketLike {
  send(data: string): void
  close(): void
  onopen: ((ev?: unknown) => void) | null
  onmessage: ((ev: { data: unknown }) => void) | null
  onclose: ((ev?: unknown) => void) | null
  onerror: ((ev?: unknown) => void) | null
}

export type WebSocketFactory = (url: string) => WebSocketLike

export interface SessionOptions {
  url: string
  world: string
  address: string
  token?: string
  makeSocket?: WebSocketFactory
}

export class AuthFailed extends Error {}

export class Session {
  readonly opts: SessionOptions
  readonly mailboxes = new Map<string, MailboxView>()
  onError: ((frame: ErrorFrame) => void) | null = null
  onDeliver: ((frame: DeliverFrame) => void) | null = null
  connected = false

  private ws: WebSocketLike | null = null
  private tails = new Map<string, boolean>() // agent -> user-view flag

  constructor(opts: SessionOptions) {
    this.opts = opts
  }

  async connect(): Promise<void> {
    const makeSocket =
      this.opts.makeSocket ?? ((url: string) => new WebSocket(url) as unknown as WebSocketLike)
    const ws = makeSocket(this.opts.url)
    this.ws = ws
    await new Promise<void>((resolve, reject) => {
      let settled = false
      ws.onopen = () => {
        ws.send(
          JSON.stringify({
            type: 'HELLO',
            world: this.opts.world,
            address: this.opts.address,
            'auth-token': this.opts.token ?? '',
          }),
        )
      }
      ws.onmessage = (ev) => {
        const frame = JSON.parse(String(ev.data)) as Frame
        if (!settled) {
          settled = true
          if (frame.type === 'ERROR') {
            reject(new AuthFailed(`${frame.code}: ${frame.detail}`))
          } else {
            this.connected = true
            ws.onmessage = (ev2) => this.dispatch(JSON.parse(String(ev2.data)) as Frame)
            resolve()
          }
          return
        }
      }
      ws.onerror = () => {
        if (!settled) {
          settled = true
          reject(new AuthFailed('connection failed'))
        }
      }
      ws.onclose = () => {
        this.connected = false
      }
    })
    // re-establish tails from the last seen offset: no loss, no duplicates
    for (const [agent, userView] of this.tails) {
      const box = this.mailboxes.get(agent)
      this.sendFrame({
        type: 'TAIL',
        agent,
        'from-offset': box ? box.lastOffset + 1 : 0,
        'user-view': userView,
      })
    }
  }

  private dispatch(frame: Frame): void {
    if (frame.type === 'DELIVER') {
      const deliver = frame as DeliverFrame
      for (const box of this.mailboxes.values()) box.ingest(deliver)
      if (this.onDeliver) this.onDeliver(deliver)
    } else if (frame.type === 'ERROR') {
      if (this.onError) this.onError(frame as ErrorFrame)
    }
  }

  sendFrame(frame: Frame): void {
    if (!this.ws) throw new Error('not connected')
    this.ws.send(JSON.stringify(frame))
  }

  composeAndSend(to: string, subject: string, body: string, hint?: string): void {
    if (to.trim() === '') throw new Error('To address must not be empty')
    this.sendFrame({
      type: 'SEND',
      mbox: buildMbox({ from: this.opts.address, to, subject, body, hint }),
    })
  }

  mailbox(agent: string): MailboxView {
    let box = this.mailboxes.get(agent)
    if (!box) {
      box = new MailboxView(agent)
      this.mailboxes.set(agent, box)
    }
    return box
  }

  tail(agent: string, userView = false): MailboxView {
    const box = this.mailbox(agent)
    this.tails.set(agent, userView)
    this.sendFrame({
      type: 'TAIL',
      agent,
      'from-offset': box.lastOffset + 1,
      'user-view': userView,
    })
    return box
  }

  close(): void {
    this.ws?.close()
    this.connected = false
  }
}
