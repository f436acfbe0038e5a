"""
Mask annealing, confidence refinement and the EMA teacher
=========================================================
"""
import numpy as np

from uda_forge.control import (ACRState, AnnealState, anneal_update, cosine_step, ema_update,
                               filter_pseudo_labels)
from uda_forge.detector import Detection

# the annealing step follows a warm-restart cosine between eta_max and eta_min
s = AnnealState(mu=0.3, eta_min=0.05, eta_max=0.15, T_i=100)
print("eta at T_c = 0, 50, 100:",
      [round(cosine_step(AnnealState(T_i=100, T_c=t)), 4) for t in (0, 50, 100)])

# the mask ratio rises while reconstruction beats its running mean and falls otherwise
losses = np.concatenate([np.linspace(1.0, 0.5, 40), np.linspace(0.5, 1.2, 40)])
trace = []
for L in losses:
    s = anneal_update(s, float(L))
    trace.append(s.mu)
print("mu after improving losses:", round(trace[39], 3), " after worsening losses:", round(trace[-1], 3))

# the pseudo-label threshold moves from soft to hard along a sigmoid
for t in (0, 100, 250, 500, 1000):
    st = ACRState(0.15, 0.80, 5.0, t, 1000)
    print(f"t={t:>4}  delta={st.delta:.3f}  C={st.threshold:.3f}")

dets = [Detection(10, 10, 6, 6, sc) for sc in (0.1, 0.3, 0.5, 0.9)]
print("survivors at C=0.15 / 0.8:", len(filter_pseudo_labels(dets, 0.15)), len(filter_pseudo_labels(dets, 0.8)))

# the teacher is an exponential moving average of the student
teacher, student = {"w": np.array([1.0])}, {"w": np.array([0.0])}
for _ in range(1000):
    ema_update(teacher, student, 0.9996)
print("teacher weight after 1000 updates toward 0:", round(float(teacher["w"][0]), 4))
