// HTML string builders. Each one is a pure projection of state so the
// contract tests can assert on markup without a live backend.

import { Candidate, RATING_METRICS } from './api.js'
import { ChatTurn, UiSessionState, argmaxIndex, ratingComplete } from './state.js'

export function escapeHtml(s: string): string {
  return s.replace(/[&<>"']/g, (c) =>
    ({ '&': '&amp;', '<': '&lt;', '>': '&gt;', '"': '&quot;', "'": '&#39;' })[c] as string,
  )
}

export function renderSwitchBadge(switched: boolean): string {
  if (!switched) {
    return ''
  }
  return '<span class="switch-badge">new topic</span>'
}

// 0..1 bar for the coherence score with a tick where the threshold sits,
// so near-threshold turns are visible at a glance.
export function renderBetaGauge(beta: number, epsilon: number): string {
  const fill = Math.min(100, Math.max(0, beta * 100))
  const mark = Math.min(100, Math.max(0, epsilon * 100))
  return (
    `<span class="beta-label">β ${beta.toFixed(3)}</span>` +
    '<span class="beta-gauge">' +
    `<span class="beta-fill" style="width: ${fill}%"></span>` +
    `<span class="epsilon-mark" style="left: ${mark}%" title="ε = ${epsilon}"></span>` +
    '</span>'
  )
}

export function renderCandidates(candidates: Candidate[]): string {
  if (candidates.length === 0) {
    return ''
  }
  const selected = argmaxIndex(candidates)
  const rows = candidates
    .map((cand, i) => {
      const cls = i === selected ? 'candidate-row selected' : 'candidate-row'
      return (
        `<tr class="${cls}" data-z="${cand.z}">` +
        `<td>${cand.z}</td>` +
        `<td>${escapeHtml(cand.text)}</td>` +
        `<td>${cand.score.toFixed(3)}</td>` +
        '</tr>'
      )
    })
    .join('')
  return (
    '<details class="candidates"><summary>candidates</summary>' +
    '<table><thead><tr><th>z</th><th>response</th><th>score</th></tr></thead>' +
    `<tbody>${rows}</tbody></table></details>`
  )
}

export function renderTurn(turn: ChatTurn, epsilon: number): string {
  const note = turn.degenerate ? '<span class="degenerate-note">first turn</span>' : ''
  return (
    `<div class="msg user">${escapeHtml(turn.userText)}</div>` +
    '<div class="msg bot">' +
    renderSwitchBadge(turn.switched) +
    `<div class="bot-text">${escapeHtml(turn.response)}</div>` +
    `<div class="turn-meta">${renderBetaGauge(turn.beta, epsilon)}${note}</div>` +
    renderCandidates(turn.candidates) +
    '</div>'
  )
}

export function renderTranscript(state: UiSessionState): string {
  if (state.turns.length === 0) {
    return '<div class="empty-hint">Say something to start the conversation.</div>'
  }
  return state.turns.map((turn) => renderTurn(turn, state.epsilon)).join('')
}

export function renderRatingForm(state: UiSessionState): string {
  if (state.turns.length === 0) {
    return '<div class="rating-hint">Rate the bot after at least one turn.</div>'
  }
  if (state.ratingLocked) {
    const stored = RATING_METRICS.map(
      (m) => `<span class="stored-score">${m}: ${state.ratingSelection[m] ?? '?'}</span>`,
    ).join(' ')
    return `<div class="rating-locked">Rating submitted. ${stored}</div>`
  }
  const groups = RATING_METRICS.map((metric) => {
    const buttons = [0, 1, 2]
      .map((value) => {
        const checked = state.ratingSelection[metric] === value ? ' checked' : ''
        return (
          `<label><input type="radio" name="${metric}" value="${value}"${checked}>` +
          `${value}</label>`
        )
      })
      .join('')
    return `<fieldset class="metric"><legend>${metric}</legend>${buttons}</fieldset>`
  }).join('')
  const disabled = ratingComplete(state.ratingSelection) ? '' : ' disabled'
  return (
    `<form id="rating-form">${groups}` +
    `<button id="rating-submit" type="submit"${disabled}>Submit rating</button>` +
    '<span class="rating-scale">0 bad, 1 neutral, 2 good</span></form>'
  )
}

export function renderFooter(state: UiSessionState): string {
  if (state.sessionId === null) {
    return 'no session'
  }
  return `session ${state.sessionId} · topic segments ${state.topicSegments}`
}
