// Typed client for the chat service. Every display value in the UI is a
// projection of these payloads; nothing is re-scored client side.

export const config = {
  // '' means same-origin; point this at another host to run against a
  // separately served backend.
  backendUrl: '',
}

export const RATING_METRICS = ['coherence', 'informativeness', 'engagingness', 'humanness'] as const
export type Metric = (typeof RATING_METRICS)[number]

export interface Candidate {
  z: number
  text: string
  score: number
}

export interface MessageReply {
  response: string
  switched: boolean
  beta: number
  candidates?: Candidate[]
}

export interface TurnPayload {
  user_text: string
  response: string
  switched: boolean
  beta: number
  degenerate: boolean
  candidates?: Candidate[]
}

export type Rating = Record<Metric, number>

export interface TranscriptPayload {
  id: string
  created_at: number
  epsilon: number
  k: number
  topic_segments: number
  turns: TurnPayload[]
  rating: Rating | null
}

export class ApiFailure extends Error {
  status: number
  code: string

  constructor(status: number, code: string, message: string) {
    super(message)
    this.status = status
    this.code = code
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  let resp: Response
  try {
    resp = await fetch(config.backendUrl + path, init)
  } catch (err) {
    throw new ApiFailure(0, 'unreachable', String(err))
  }
  if (!resp.ok) {
    throw await failureFrom(resp)
  }
  return resp.json() as Promise<T>
}

// The service wraps every error as {"error": {"code", "message"}}.
async function failureFrom(resp: Response): Promise<ApiFailure> {
  let code = `http_${resp.status}`
  let message = resp.statusText
  try {
    const body = await resp.json()
    if (body && body.error) {
      code = body.error.code
      message = body.error.message
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiFailure(resp.status, code, message)
}

function postJson(payload: unknown): RequestInit {
  return {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: JSON.stringify(payload),
  }
}

export async function createSession(): Promise<{ id: string }> {
  return request('/sessions', postJson({}))
}

export async function sendMessage(sessionId: string, text: string): Promise<MessageReply> {
  return request(`/sessions/${sessionId}/messages`, postJson({ text }))
}

export async function getTranscript(sessionId: string): Promise<TranscriptPayload> {
  return request(`/sessions/${sessionId}`)
}

// Validates a rating selection and fixes the key order to match the
// service's ratings CSV columns (session_id is added server side).
export function buildRatingBody(selection: Partial<Record<Metric, number>>): Rating {
  const body = {} as Rating
  for (const metric of RATING_METRICS) {
    const value = selection[metric]
    if (value === undefined) {
      throw new Error(`rating is missing '${metric}'`)
    }
    if (!Number.isInteger(value) || value < 0 || value > 2) {
      throw new Error(`rating '${metric}' must be 0, 1 or 2, got ${value}`)
    }
    body[metric] = value
  }
  return body
}

export async function submitRating(sessionId: string, rating: Rating): Promise<{ rating: Rating }> {
  return request(`/sessions/${sessionId}/ratings`, postJson(rating))
}

// Export keeps the exact bytes the API returned rather than re-serializing,
// so a downloaded transcript compares equal to the live response.
export async function exportTranscriptText(sessionId: string): Promise<string> {
  let resp: Response
  try {
    resp = await fetch(`${config.backendUrl}/sessions/${sessionId}`)
  } catch (err) {
    throw new ApiFailure(0, 'unreachable', String(err))
  }
  if (!resp.ok) {
    throw await failureFrom(resp)
  }
  return resp.text()
}
