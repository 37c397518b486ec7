import numpy as np

from avvp.metrics import BinaryParse, Counts, evaluate, event_at_av, match_events, span_iou, type_at_av

# ### Segment and event F-scores
#
# Segment level counts every (segment, class) cell. Event level first groups
# consecutive positive segments into spans and matches predicted to true spans
# one-to-one at IoU >= 0.5.

print("IoU((2,5), (3,5)) =", span_iou((2, 5), (3, 5)))
print("IoU((0,3), (3,3)) =", span_iou((0, 3), (3, 3)))
print("matched pairs:", match_events([(0, 3), (6, 8)], [(0, 2), (5, 8), (9, 9)]))

# Type@AV averages the three category scores; Event@AV pools the audio and
# visual counts before computing F.

print("Type@AV(61.9, 64.8, 57.6) =", round(type_at_av(61.9, 64.8, 57.6), 1))
print("Event@AV =", event_at_av(Counts(1, 0, 1), Counts(1, 1, 0)))

# ### A full report on a toy parse
#
# One video, four segments, two classes. The audio track misses half of an
# audio-only event; the visual track over-extends a bimodal one.

gt_a = np.array([[1, 0], [1, 0], [0, 0], [0, 1]], np.uint8)
gt_v = np.array([[0, 0], [0, 0], [0, 1], [0, 1]], np.uint8)
pred_a = np.array([[1, 0], [0, 0], [0, 0], [0, 1]], np.uint8)
pred_v = np.array([[0, 0], [0, 1], [0, 1], [0, 1]], np.uint8)
report = evaluate([BinaryParse(pred_a, pred_v)], [(gt_a, gt_v)])
print(report.to_table())
print("\n".join(report.to_records()[:4]))
