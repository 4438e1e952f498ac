"""
Frame-by-frame prediction with bounded memory
=============================================

Every convolution in the model is causal, so a prediction at frame ``t``
depends only on a fixed window of earlier frames. A streaming predictor
keeps exactly that window per layer and reproduces batch inference bit
for bit.
"""

import time

import numpy as np

from anticipation import AnticipationModel, ModelDims, StreamingPredictor, enumerate_candidates

N, T = 6, 400
rng = np.random.default_rng(1)
boxes = rng.uniform(0.05, 0.95, (T, N, 5))
boxes[rng.random((T, N)) > 0.6] = 0.0

dims = ModelDims(n_nodes=N, n_events=4, C=5, k=2, l_p=4, l_t=4)
candidates = enumerate_candidates([boxes], N, dims.C)
model = AnticipationModel.init(dims, candidates, seed=0)
print("receptive field:", dims.receptive_field(), "frames")

start = time.perf_counter()
batch = model.predict(boxes)
print(f"batch predict: {time.perf_counter() - start:.2f} s for {T} frames")

sp = StreamingPredictor(model)
online = []
start = time.perf_counter()
for frame in boxes:
    online.append(sp.push(frame))
online = np.stack(online)
print(f"streaming: {(time.perf_counter() - start) / T * 1e3:.2f} ms per frame, "
      f"{sp.buffered_frames()} buffered layer inputs")

print("max |stream - batch| =", np.abs(online - batch).max())
