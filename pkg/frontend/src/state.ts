import { Candidate, Metric, MessageReply, RATING_METRICS, TranscriptPayload } from './api.js'

export interface ChatTurn {
  userText: string
  response: string
  switched: boolean
  beta: number
  degenerate: boolean
  candidates: Candidate[]
}

export interface UiSessionState {
  sessionId: string | null
  epsilon: number
  turns: ChatTurn[]
  topicSegments: number
  pending: boolean
  ratingSelection: Partial<Record<Metric, number>>
  ratingLocked: boolean
  banner: string | null
}

export function initialState(): UiSessionState {
  return {
    sessionId: null,
    epsilon: 0,
    turns: [],
    topicSegments: 1,
    pending: false,
    ratingSelection: {},
    ratingLocked: false,
    banner: null,
  }
}

// Mirror of the server's selection rule: highest score wins, ties go to the
// lowest z. Returns -1 for an empty list.
export function argmaxIndex(candidates: Candidate[]): number {
  let best = -1
  for (let i = 0; i < candidates.length; i++) {
    if (best === -1) {
      best = i
      continue
    }
    const cand = candidates[i]
    const top = candidates[best]
    if (cand.score > top.score || (cand.score === top.score && cand.z < top.z)) {
      best = i
    }
  }
  return best
}

// Exactly one in-flight message at a time, and never an empty one.
export function canSend(state: UiSessionState, text: string): boolean {
  return state.sessionId !== null && !state.pending && text.trim().length > 0
}

export function ratingComplete(selection: Partial<Record<Metric, number>>): boolean {
  return RATING_METRICS.every((metric) => {
    const value = selection[metric]
    return value !== undefined && Number.isInteger(value) && value >= 0 && value <= 2
  })
}

export function applyReply(state: UiSessionState, userText: string, reply: MessageReply): void {
  state.turns.push({
    userText,
    response: reply.response,
    switched: reply.switched,
    beta: reply.beta,
    degenerate: state.turns.length === 0,
    candidates: reply.candidates ?? [],
  })
  if (reply.switched) {
    state.topicSegments += 1
  }
}

export function applyTranscript(state: UiSessionState, transcript: TranscriptPayload): void {
  state.sessionId = transcript.id
  state.epsilon = transcript.epsilon
  state.topicSegments = transcript.topic_segments
  state.turns = transcript.turns.map((t) => ({
    userText: t.user_text,
    response: t.response,
    switched: t.switched,
    beta: t.beta,
    degenerate: t.degenerate,
    candidates: t.candidates ?? [],
  }))
  state.ratingLocked = transcript.rating !== null
  if (transcript.rating !== null) {
    state.ratingSelection = { ...transcript.rating }
  }
}
