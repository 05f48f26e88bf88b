/**
 * Browser shell around the session logic: instructions screen, one
 * trial at a time on a neutral mid-gray page, left/center/right
 * buttons plus arrow-key bindings, a progress counter, a brief gray
 * gap between trials, and a completion screen.
 *
 * The session id is kept in localStorage so a reload resumes at the
 * first unanswered trial (the server decides which one that is).
 */

import {
  Choice,
  SessionClient,
  TrialView,
  runSession,
} from "./client.js";

const STORAGE_KEY = "phantasmagoria-session";
const INTER_TRIAL_MS = 500;
const STIMULUS_BASE_PX = 128;

export const KEY_TO_CHOICE: Record<string, Choice> = {
  ArrowLeft: "left",
  ArrowDown: "center",
  ArrowRight: "right",
};

/**
 * Integer zoom picked once per session: as large as fits comfortably
 * in the viewport, at most 4x (the calibration the instructions
 * assume), at least 1x. Nearest-neighbor scaling keeps pixels square.
 */
function pickZoom(): number {
  const room = Math.min(window.innerWidth, window.innerHeight) * 0.7;
  return Math.max(1, Math.min(4, Math.floor(room / STIMULUS_BASE_PX)));
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

class App {
  private readonly root: HTMLElement;
  private readonly client: SessionClient;
  private zoom = 4;
  private keyHandler: ((ev: KeyboardEvent) => void) | null = null;

  constructor(root: HTMLElement) {
    this.root = root;
    this.client = new SessionClient(window.location.origin);
  }

  async start(): Promise<void> {
    const stored = window.localStorage.getItem(STORAGE_KEY);
    if (stored) {
      try {
        const progress = await this.client.progress(stored);
        if (!progress.complete) {
          this.zoom = pickZoom();
          await this.runTrials(stored, progress.answered > 0);
          return;
        }
        window.localStorage.removeItem(STORAGE_KEY);
      } catch {
        // Unknown or expired session: fall through to a fresh start.
        window.localStorage.removeItem(STORAGE_KEY);
      }
    }
    this.showInstructions();
  }

  private showInstructions(): void {
    this.root.replaceChildren();
    const card = el("div", "card");
    card.append(
      el("h1", undefined, "Lightness judgment"),
      el(
        "p",
        undefined,
        "On each screen you will see an image containing two identical " +
          "gray squares. Decide which square looks lighter. If you see " +
          "no difference, answer center.",
      ),
      el(
        "p",
        undefined,
        "Keys: ← left square, → right square, ↓ no " +
          "difference. Buttons work too. There is no time limit; answer " +
          "by first impression.",
      ),
      el(
        "p",
        "note",
        "Viewing setup: sit about 50 cm from the screen so each square " +
          "spans roughly 1.5 degrees of visual angle at the default " +
          "display scale. Use a calibrated monitor in a dim room when " +
          "collecting real data.",
      ),
    );
    const label = el("label", undefined, "Observer code (optional): ");
    const input = el("input");
    input.type = "text";
    input.placeholder = "anonymous";
    label.append(input);
    const button = el("button", "primary", "Begin");
    button.addEventListener("click", () => {
      void this.beginSession(input.value.trim() || "anonymous");
    });
    card.append(label, button);
    this.root.append(card);
  }

  private async beginSession(observerId: string): Promise<void> {
    this.zoom = pickZoom();
    const info = await this.client.createSession(observerId);
    window.localStorage.setItem(STORAGE_KEY, info.sessionId);
    await this.runTrials(info.sessionId, false);
  }

  private async runTrials(sessionId: string, resumed: boolean):
    Promise<void> {
    if (resumed) {
      await this.showInterstitial("Resuming where you left off…");
    }
    await runSession(this.client, sessionId, {
      onTrial: async (trial) => {
        if (trial.index > 0 || resumed) {
          await this.showInterstitial();
        }
        await this.renderTrial(trial);
      },
      choose: (trial) => this.awaitChoice(trial),
      onComplete: () => {
        window.localStorage.removeItem(STORAGE_KEY);
        this.showCompletion();
      },
    });
  }

  /** Neutral gray gap between trials to limit adaptation carryover. */
  private showInterstitial(message = ""): Promise<void> {
    this.root.replaceChildren(el("div", "interstitial", message));
    return new Promise((resolve) => setTimeout(resolve, INTER_TRIAL_MS));
  }

  private async renderTrial(trial: TrialView): Promise<void> {
    this.root.replaceChildren();
    const wrap = el("div", "trial");
    wrap.append(
      el("div", "progress", `Trial ${trial.index + 1} of ${trial.total}`),
    );

    const img = el("img", "stimulus");
    img.alt = "stimulus";
    img.width = STIMULUS_BASE_PX * this.zoom;
    img.draggable = false;
    img.src = trial.imageUrl;
    wrap.append(img);

    wrap.append(el("p", "prompt", trial.prompt));
    const row = el("div", "choices");
    for (const choice of ["left", "center", "right"] as const) {
      const button = el("button", "choice", choice);
      button.dataset.choice = choice;
      row.append(button);
    }
    wrap.append(row);
    wrap.append(
      el("div", "hint", "← left    ↓ center    → right"),
    );
    this.root.append(wrap);
    await new Promise<void>((resolve) => {
      if (img.complete) resolve();
      else {
        img.addEventListener("load", () => resolve(), { once: true });
        img.addEventListener("error", () => resolve(), { once: true });
      }
    });
  }

  private awaitChoice(
    _trial: TrialView,
  ): Promise<{ choice: Choice; responseMs: number }> {
    const shownAt = performance.now();
    return new Promise((resolve) => {
      const settle = (choice: Choice) => {
        if (this.keyHandler) {
          window.removeEventListener("keydown", this.keyHandler);
          this.keyHandler = null;
        }
        resolve({
          choice,
          responseMs: Math.round(performance.now() - shownAt),
        });
      };
      for (const button of this.root.querySelectorAll("button.choice")) {
        button.addEventListener("click", () => {
          settle((button as HTMLButtonElement).dataset.choice as Choice);
        });
      }
      this.keyHandler = (ev: KeyboardEvent) => {
        const choice = KEY_TO_CHOICE[ev.key];
        if (choice) {
          ev.preventDefault();
          settle(choice);
        }
      };
      window.addEventListener("keydown", this.keyHandler);
    });
  }

  private showCompletion(): void {
    this.root.replaceChildren();
    const card = el("div", "card");
    card.append(
      el("h1", undefined, "Done — thank you!"),
      el(
        "p",
        undefined,
        "All trials are answered and saved. You can close this window.",
      ),
    );
    this.root.append(card);
  }
}

const mount = typeof document === "undefined"
  ? null
  : document.getElementById("app");
if (mount) {
  const app = new App(mount);
  void app.start();
}
