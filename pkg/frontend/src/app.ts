// DOM wiring for the single-page console. All state lives in Session /
// MailboxView; this file only renders it and forwards form events.

import { MailboxEntry, MailboxView, ViewMode } from './mailbox.js'
import { Session } from './session.js'

let session: Session | null = null
let current: MailboxView | null = null

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node as T
}

function renderEntry(entry: MailboxEntry): HTMLElement {
  const item = document.createElement('article')
  item.className = entry.system ? 'message system' : 'message'
  const head = document.createElement('header')
  head.textContent = `#${entry.offset ?? '?'} ${entry.message.from} → ${entry.message.to.join(
    ', ',
  )}  ${entry.message.subject}`
  item.appendChild(head)
  if (entry.tokenAnnotation) {
    const tok = document.createElement('span')
    tok.className = 'tokens'
    tok.textContent = entry.tokenAnnotation
    item.appendChild(tok)
  }
  const body = document.createElement('pre')
  body.textContent = entry.message.body
  item.appendChild(body)
  const source = document.createElement('details')
  const summary = document.createElement('summary')
  summary.textContent = 'view source'
  const raw = document.createElement('pre')
  raw.className = 'source'
  raw.textContent = entry.message.raw // exact bytes as received
  source.appendChild(summary)
  source.appendChild(raw)
  item.appendChild(source)
  return item
}

export function renderMailbox(box: MailboxView, root: HTMLElement): void {
  root.replaceChildren(...box.visible().map(renderEntry))
  const counter = document.getElementById('token-counter')
  if (counter) {
    counter.textContent =
      box.lastTokens === null ? '' : `${box.lastTokens.toLocaleString()} tokens`
  }
}

function renderSidebar(): void {
  if (!session) return
  const list = el<HTMLUListElement>('agents')
  list.replaceChildren(
    ...[...session.mailboxes.keys()].sort().map((agent) => {
      const li = document.createElement('li')
      li.textContent = agent
      li.onclick = () => selectAgent(agent)
      return li
    }),
  )
}

function selectAgent(agent: string): void {
  if (!session) return
  current = session.tail(agent, current?.mode !== ViewMode.FullView)
  renderMailbox(current, el('messages'))
}

export function boot(): void {
  el<HTMLFormElement>('connect-form').onsubmit = async (ev) => {
    ev.preventDefault()
    const status = el('status')
    try {
      session = new Session({
        url: el<HTMLInputElement>('server-url').value,
        world: el<HTMLInputElement>('world').value,
        address: el<HTMLInputElement>('address').value,
        token: el<HTMLInputElement>('token').value,
      })
      session.onDeliver = () => {
        renderSidebar()
        if (current) renderMailbox(current, el('messages'))
      }
      session.onError = (frame) => {
        status.textContent = `${frame.code}: ${frame.detail}`
      }
      await session.connect()
      status.textContent = 'connected'
    } catch (err) {
      status.textContent = String(err)
    }
  }

  el<HTMLFormElement>('compose-form').onsubmit = (ev) => {
    ev.preventDefault()
    if (!session) return
    const to = el<HTMLInputElement>('compose-to').value
    try {
      session.composeAndSend(
        to,
        el<HTMLInputElement>('compose-subject').value,
        el<HTMLTextAreaElement>('compose-body').value,
        el<HTMLSelectElement>('compose-hint').value || undefined,
      )
      session.tail(to)
      renderSidebar()
    } catch (err) {
      el('status').textContent = String(err)
    }
  }

  el<HTMLInputElement>('full-view').onchange = (ev) => {
    if (!current) return
    const full = (ev.target as HTMLInputElement).checked
    current.setMode(full ? ViewMode.FullView : ViewMode.UserView)
    if (full && session) session.tail(current.agent, false) // fetch hidden rows
    renderMailbox(current, el('messages'))
  }
}

if (typeof document !== 'undefined' && document.getElementById('connect-form')) {
  boot()
}
