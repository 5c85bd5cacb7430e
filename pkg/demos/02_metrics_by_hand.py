# The evaluation numbers on inputs small enough to check by hand.
import numpy as np

from clad.metrics import FeatureStats, ScoreMatrix, average_forgetting, average_score, fid, pixel_f1
from clad.scoring import best_f1_threshold

# pixel f1: 2 TP / (2 TP + FP + FN)
gt = np.array([[1, 1, 0, 0]])
pred = np.array([[1, 0, 1, 0]])
print("f1", pixel_f1(pred, gt))  # TP=1 FP=1 FN=1 -> 0.5

# the threshold is chosen once for a whole task, over all of its pixels
maps = [np.array([[0.9, 0.7, 0.2, 0.1]]), np.array([[0.8, 0.3, 0.6, 0.0]])]
gts = [np.array([[1, 1, 0, 0]]), np.array([[1, 0, 0, 0]])]
print("best threshold and f1", best_f1_threshold(maps, gts))

# a score matrix: row i holds the scores on tasks 1..i after training task i
m = ScoreMatrix(3)
m[1, 1] = 0.40
m[2, 1], m[2, 2] = 0.30, 0.50
m[3, 1], m[3, 2], m[3, 3] = 0.20, 0.45, 0.35
print(m.to_csv())
print("average score", average_score(m))  # (0.20 + 0.45 + 0.35) / 3
# task 1 lost half of its best score, task 2 a tenth: (0.5 + 0.1) / 2
print("forgetting", average_forgetting(m))

# FID between two 1-D Gaussians: squared mean gap plus (sigma_r - sigma_g)^2
real = FeatureStats(np.array([0.0]), np.array([[1.0]]), 2)
gen = FeatureStats(np.array([3.0]), np.array([[4.0]]), 2)
print("fid", fid(real, gen))  # 9 + (1 - 2)^2 = 10
