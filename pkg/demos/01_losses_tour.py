"""A tour of the task loss and the six distillation losses.

Builds a small batch of synthetic teacher/student embeddings and walks
through every loss term, demonstrating the identities each one satisfies
(reductions, zero points, bounds).

Run: python demos/01_losses_tour.py
"""

import numpy as np

from clipkd import (ClipModel, EmbeddingBatch, KdWeights, RngStream, afd_loss,
                    clip_loss, combined_loss, contrastive_distribution,
                    crd_loss, fd_loss, gd_loss, icl_loss, mfd_loss)
from clipkd.encoders import ModelConfig, TowerConfig, init_model
from clipkd.numcore import l2_normalize_rows

rng = RngStream(seed=0, stream_id=1)
n, d = 8, 16


def unit(shape):
    return l2_normalize_rows(rng.normal(size=shape))


teacher_image = EmbeddingBatch(unit((n, d)))
teacher_text = EmbeddingBatch(unit((n, d)))
student_image = EmbeddingBatch(unit((n, d)))
student_text = EmbeddingBatch(unit((n, d)))
tau_teacher, tau_student = 0.05, 0.07

print("== task loss (symmetric InfoNCE over the batch) ==")
task = clip_loss(student_image, student_text, tau_student)
print(f"random student embeddings, tau={tau_student}: {task:.4f}")
aligned = clip_loss(teacher_image, teacher_text, 1e6)
print(f"same batch at near-infinite temperature -> ~log(n) = {np.log(n):.4f}: {aligned:.4f}")

print("\n== CRD: KL between teacher and student contrastive distributions ==")
p_t = contrastive_distribution(teacher_image, teacher_text, tau_teacher, "i2t")
q_t = contrastive_distribution(teacher_text, teacher_image, tau_teacher, "t2i")
p_s = contrastive_distribution(student_image, student_text, tau_student, "i2t")
q_s = contrastive_distribution(student_text, student_image, tau_student, "t2i")
print(f"teacher vs student: {crd_loss(p_t, q_t, p_s, q_s):.4f}")
print(f"teacher vs itself (must be exactly 0): {crd_loss(p_t, q_t, p_t, q_t):.4f}")

print("\n== FD: mean squared embedding distance, both modalities ==")
print(f"student vs teacher: {fd_loss(teacher_image, student_image, teacher_text, student_text):.4f}")
print(f"teacher vs itself: {fd_loss(teacher_image, teacher_image, teacher_text, teacher_text):.4f}")
print("bound for unit rows: each ||a-b||^2 <= 4, two modalities -> <= 8")

print("\n== MFD: same formula, masked student image forward ==")
print("identical inputs reduce MFD to FD bit-for-bit:",
      mfd_loss(teacher_image, student_image, teacher_text, student_text)
      == fd_loss(teacher_image, student_image, teacher_text, student_text))

print("\n== GD: MSE between the models' own task-loss gradient fields ==")
value = gd_loss(teacher_image, teacher_text, student_image, student_text,
                tau_teacher, tau_student)
print(f"different embeddings and temperatures: {value:.6f}")
same = gd_loss(teacher_image, teacher_text, teacher_image, teacher_text,
               tau_teacher, tau_teacher)
print(f"student == teacher, same tau (must be 0): {same:.6f}")

print("\n== ICL: student anchors against teacher contrast sets ==")
print(f"random student: {icl_loss(student_image, student_text, teacher_image, teacher_text, tau_student):.4f}")
reduced = icl_loss(teacher_image, teacher_text, teacher_image, teacher_text, tau_student)
print(f"student == teacher equals clip_loss on the teacher batch: "
      f"{reduced:.6f} vs {clip_loss(teacher_image, teacher_text, tau_student):.6f}")

print("\n== AFD: task loss on fused student||teacher embeddings ==")
cfg = ModelConfig(embed_dim=d,
                  image=TowerConfig(tokens=4, token_dim=4, width=8, blocks=1),
                  text=TowerConfig(tokens=4, token_dim=4, width=8, blocks=1),
                  fuse_with=d)
model = init_model(cfg, RngStream(0, 2))
print(f"random fusion heads: {afd_loss(model, student_image, student_text, teacher_image, teacher_text, tau_student):.4f}")
selection = np.vstack([np.eye(d), np.zeros((d, d))])
model.params["fuse_img.w"][:] = selection
model.params["fuse_txt.w"][:] = selection
reduced = afd_loss(model, student_image, student_text, teacher_image, teacher_text, tau_student)
print(f"[I|0] selection heads reduce AFD to clip_loss on the student: "
      f"{reduced:.6f} vs {clip_loss(student_image, student_text, tau_student):.6f}")

print("\n== combined loss: task + sum of weighted enabled terms ==")
weights = KdWeights.unified()  # FD + CRD + ICL at their reference weights
breakdown = combined_loss(weights, student_image=student_image,
                          student_text=student_text, tau_student=tau_student,
                          teacher_image=teacher_image, teacher_text=teacher_text,
                          tau_teacher=tau_teacher)
print(f"task = {breakdown.task:.4f}")
for name, value in breakdown.terms.items():
    print(f"{name:4s} = {value:.6f}  (weight {weights.weight(name):g})")
print(f"total = {breakdown.total:.4f}")
zero = combined_loss(KdWeights(), student_image=student_image,
                     student_text=student_text, tau_student=tau_student)
print(f"all weights zero -> total == task: {zero.total == zero.task}")
