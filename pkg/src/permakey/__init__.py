"""Unsupervised object keypoints from local predictability, plus a
Transporter baseline and a recurrent Q-learning harness for using the
keypoints in downstream control."""

__version__ = "0.1.0"
