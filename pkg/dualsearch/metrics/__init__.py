METRIC_NAMES = ("SD", "VIF", "CC", "TMQI", "MS_SSIM", "MEF_SSIM", "EN", "QABF")
REFERENCE_METRICS = ("CC", "TMQI", "MS_SSIM")
