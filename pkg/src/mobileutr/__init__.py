"""MobileUtr: lightweight CNN-Transformer medical image segmentation in numpy."""
