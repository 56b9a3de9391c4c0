import * as api from './api.js'
import {
  UiSessionState,
  applyReply,
  applyTranscript,
  canSend,
  initialState,
  ratingComplete,
} from './state.js'
import { renderFooter, renderRatingForm, renderTranscript } from './render.js'

export const state: UiSessionState = initialState()

interface Elements {
  banner: HTMLElement
  transcript: HTMLElement
  composer: HTMLFormElement
  input: HTMLInputElement
  sendButton: HTMLButtonElement
  ratingPanel: HTMLElement
  exportButton: HTMLButtonElement
  footer: HTMLElement
}

let els: Elements

function grabElements(): Elements {
  const get = (id: string): HTMLElement => {
    const el = document.getElementById(id)
    if (!el) {
      throw new Error(`missing element #${id}`)
    }
    return el
  }
  return {
    banner: get('banner'),
    transcript: get('transcript'),
    composer: get('composer') as HTMLFormElement,
    input: get('message-input') as HTMLInputElement,
    sendButton: get('send-button') as HTMLButtonElement,
    ratingPanel: get('rating-panel'),
    exportButton: get('export-button') as HTMLButtonElement,
    footer: get('session-footer'),
  }
}

export function render(): void {
  if (state.banner !== null) {
    els.banner.innerHTML =
      `${renderBannerText(state.banner)} <button id="banner-retry">retry</button>`
    els.banner.classList.remove('hidden')
    document.getElementById('banner-retry')?.addEventListener('click', () => {
      void startSession()
    })
  } else {
    els.banner.classList.add('hidden')
  }

  els.transcript.innerHTML = renderTranscript(state)
  els.transcript.scrollTop = els.transcript.scrollHeight

  els.ratingPanel.innerHTML = renderRatingForm(state)
  wireRatingForm()

  els.footer.textContent = renderFooter(state)
  els.input.disabled = state.pending || state.sessionId === null
  els.sendButton.disabled = !canSend(state, els.input.value)
  els.exportButton.disabled = state.sessionId === null
}

function renderBannerText(text: string): string {
  const div = document.createElement('div')
  div.textContent = text
  return div.innerHTML
}

function wireRatingForm(): void {
  const form = document.getElementById('rating-form')
  if (!form) {
    return
  }
  form.querySelectorAll('input[type=radio]').forEach((el) => {
    el.addEventListener('change', () => {
      const input = el as HTMLInputElement
      state.ratingSelection[input.name as api.Metric] = Number(input.value)
      render()
    })
  })
  form.addEventListener('submit', (e) => {
    e.preventDefault()
    void submitRating()
  })
}

export async function startSession(): Promise<void> {
  state.banner = null
  render()
  try {
    const { id } = await api.createSession()
    const transcript = await api.getTranscript(id)
    applyTranscript(state, transcript)
  } catch (err) {
    state.banner = `could not reach the chat service: ${describe(err)}`
  }
  render()
}

export async function sendCurrentMessage(): Promise<void> {
  const text = els.input.value
  if (!canSend(state, text)) {
    return
  }
  state.pending = true
  state.banner = null
  els.input.value = ''
  render()
  try {
    const reply = await api.sendMessage(state.sessionId as string, text)
    applyReply(state, text, reply)
  } catch (err) {
    state.banner = `message failed: ${describe(err)}`
  }
  state.pending = false
  render()
  els.input.focus()
}

async function submitRating(): Promise<void> {
  if (!ratingComplete(state.ratingSelection)) {
    return
  }
  try {
    const body = api.buildRatingBody(state.ratingSelection)
    await api.submitRating(state.sessionId as string, body)
    state.ratingLocked = true
  } catch (err) {
    if (err instanceof api.ApiFailure && err.code === 'already_rated') {
      state.ratingLocked = true
    } else {
      state.banner = `rating failed: ${describe(err)}`
    }
  }
  render()
}

export async function exportTranscript(): Promise<void> {
  if (state.sessionId === null) {
    return
  }
  try {
    const text = await api.exportTranscriptText(state.sessionId)
    downloadJson(text, `session-${state.sessionId}.json`)
  } catch (err) {
    state.banner = `export failed: ${describe(err)}`
    render()
  }
}

// The blob holds the exact bytes the API returned; see exportTranscriptText.
function downloadJson(text: string, filename: string): void {
  const blob = new Blob([text], { type: 'application/json' })
  const url = URL.createObjectURL(blob)
  const anchor = document.createElement('a')
  anchor.href = url
  anchor.download = filename
  anchor.click()
  URL.revokeObjectURL(url)
}

function describe(err: unknown): string {
  if (err instanceof api.ApiFailure) {
    return `${err.code}: ${err.message}`
  }
  return String(err)
}

export function initApp(): void {
  els = grabElements()
  els.composer.addEventListener('submit', (e) => {
    e.preventDefault()
    void sendCurrentMessage()
  })
  els.input.addEventListener('input', () => {
    els.sendButton.disabled = !canSend(state, els.input.value)
  })
  els.exportButton.addEventListener('click', () => {
    void exportTranscript()
  })
  void startSession()
}
