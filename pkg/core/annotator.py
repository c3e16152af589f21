from PIL import Image, ImageDraw, ImageFont
import io
import numpy as np
from typing import Optional


class LocalizationAnnotator:
    def __init__(self, width: int = 1020, height: int = 320, margin: int = 30):
        self.font = ImageFont.load_default()
        self.width = width
        self.height = height
        self.margin = margin

    def _points(self, values: np.ndarray, top: float, bottom: float, low: float, high: float):
        span = (high - low) or 1.0
        xs = np.linspace(self.margin, self.width - self.margin, len(values))
        ys = bottom - (np.asarray(values, dtype=float) - low) / span * (bottom - top)
        return list(zip(xs.tolist(), ys.tolist()))

    def annotate_window(self, aggregate_w: np.ndarray, status: np.ndarray, cam: Optional[np.ndarray] = None,
                        probability: Optional[float] = None, title: str = "") -> bytes:
        """Draw one window: aggregate power, shaded predicted ON spans and the ensemble CAM

        Args:
            aggregate_w: Aggregate power of the window (W)
            status: Predicted binary status
            cam: Optional normalized ensemble CAM
            probability: Optional ensemble detection probability for the caption

        Returns:
            Bytes of the PNG image
        """
        image = Image.new("RGB", (self.width, self.height), "white")
        draw = ImageDraw.Draw(image)
        top, bottom = self.margin, self.height - self.margin
        step = (self.width - 2 * self.margin) / max(len(status) - 1, 1)

        # Shade ON spans
        on = np.flatnonzero(np.asarray(status) > 0)
        for t in on:
            x = self.margin + t * step
            draw.rectangle([x - step / 2, top, x + step / 2, bottom], fill=(255, 215, 215))

        peak = float(np.max(aggregate_w)) if len(aggregate_w) else 1.0
        draw.line(self._points(aggregate_w, top, bottom, 0.0, peak or 1.0), fill="black", width=1)
        if cam is not None:
            draw.line(self._points(cam, top, bottom, min(float(np.min(cam)), 0.0), 1.0), fill="red", width=1)

        caption = title
        if probability is not None:
            caption = f"{caption}  prob={probability:.3f}".strip()
        draw.text((self.margin, 8), caption, fill="black", font=self.font)
        draw.text((self.margin, bottom + 8), f"max {peak:.0f} W", fill="black", font=self.font)

        output = io.BytesIO()
        image.save(output, format="PNG")
        return output.getvalue()
