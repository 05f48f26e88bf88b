"""A forced-choice experiment, start to finish, with a simulated observer.

Builds a pool of candidate stimuli from two methods, runs four observers
through balanced mirrored sessions, logs every event to a JSONL file, then
throws the in-memory state away and reconstructs everything from the log —
the same path the analyze command takes after a real experiment.

The simulated observer agrees with the model's prediction 75% of the time
and says "no difference" for 10% of the rest, so the recovered proportions
should land near those numbers.
"""
import os
import tempfile

import numpy as np

from phantasmagoria import psychophysics as psy

rng = np.random.default_rng(2024)

pool = [psy.CandidateStimulus(stimulus_id=f"restorenet-{i:03d}",
                              method_tag="restorenet",
                              lighter_side="right" if i % 2 else "left")
        for i in range(25)]
pool += [psy.CandidateStimulus(stimulus_id=f"odog-{i:03d}",
                               method_tag="odog",
                               lighter_side="left" if i % 3 else "right")
         for i in range(25)]
print(f"pool: {len(pool)} stimuli from 2 methods")

log_path = os.path.join(tempfile.mkdtemp(prefix="roundtrip-"), "events.jsonl")

live_sessions = []
for k, observer in enumerate(["obs-a", "obs-b", "obs-c", "obs-d"]):
    session = psy.build_session(pool, observer_id=observer, seed=100 + k)
    psy.log_session_created(log_path, session)
    for i, trial in enumerate(session.trials):
        if rng.random() < 0.10:
            choice = "center"
        elif rng.random() < 0.75:
            choice = trial.expected_side
        else:
            choice = "left" if trial.expected_side == "right" else "right"
        latency = float(rng.gamma(shape=4.0, scale=180.0))
        psy.record_response(session, i, choice, response_ms=latency)
        psy.log_response(log_path, session.session_id, i, choice,
                         response_ms=latency)
    live_sessions.append(session)

print(f"logged 4 sessions x {len(pool)} trials -> {log_path}")

# cold start from the log alone
replayed = psy.replay_events(log_path)
table = psy.summarize(list(replayed.values()))
live_table = psy.summarize(live_sessions)
assert table == live_table, "replay must reconstruct the live state exactly"
print("replayed summary matches the live one\n")

print(f"{'group':>12} {'n':>5} {'correct':>8} {'opposite':>9} {'none':>6}")
for name, g in table.groups.items():
    print(f"{name:>12} {g.n_trials:>5} {g.correct:>8.3f} "
          f"{g.opposite:>9.3f} {g.none:>6.3f}")

print()
for name, est in psy.thurstone_table(table).items():
    print(f"thurstone {name:>12}: z = {est.z:+.4f} "
          f"[{est.z_low:+.4f}, {est.z_high:+.4f}] from {est.n} trials")

mean_latency = np.mean([t.response_ms for s in live_sessions
                        for t in s.trials])
print(f"\nmean simulated latency: {mean_latency:.0f} ms")
