import { initApp } from './app.js'
import { config } from './api.js'

// Allow pointing the page at a backend on another origin without a rebuild:
// set window.TOPICCHAT_BACKEND before this script loads.
const override = (window as { TOPICCHAT_BACKEND?: string }).TOPICCHAT_BACKEND
if (override !== undefined) {
  config.backendUrl = override
}

document.addEventListener('DOMContentLoaded', () => {
  initApp()
})
