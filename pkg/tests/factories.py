"""Small constructors for predictions and annotations on tiny grids."""
import numpy as np

from tspal.geometry import Box
from tspal.records import Annotation, InstancePrediction
from tspal.scoring import TripletScores


def rect_mask(box, size=(8, 8)):
    x1, y1, x2, y2 = (int(v) for v in box)
    mask = np.zeros(size, dtype=bool)
    mask[y1:y2, x1:x2] = True
    return mask


def make_pred(class_id=0, scores=(0.9, 0.9, 0.9), box=(0, 0, 4, 4), size=(8, 8), probs=(1.0,)):
    return InstancePrediction(class_id, TripletScores(*scores), Box(*map(float, box)),
                              rect_mask(box, size), tuple(probs))


def make_gt(class_id=0, box=(0, 0, 4, 4), size=(8, 8)):
    return Annotation(class_id, Box(*map(float, box)), rect_mask(box, size))
