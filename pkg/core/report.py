import io
from datetime import datetime

from reportlab.lib.pagesizes import A4
from reportlab.lib.units import cm
from reportlab.lib.utils import simpleSplit
from reportlab.pdfgen import canvas

BOTTOM_MARGIN = 2.5 * cm


def generate_run_report(payload: dict) -> bytes:
    """
    Render a run (or a run comparison) as an A4 PDF.

    Every payload key is optional: title, date_str, config (run settings),
    section_status (CheckStatus dicts), numbers, comparison (one dict per
    run) and recommendations.
    """
    buf = io.BytesIO()
    c = canvas.Canvas(buf, pagesize=A4)
    w, h = A4
    y = h - 2.0 * cm

    def txt(x, s, size=10, bold=False):
        nonlocal y
        if y < BOTTOM_MARGIN:
            c.showPage()
            y = h - 2.0 * cm
        c.setFont("Helvetica-Bold" if bold else "Helvetica", size)
        c.drawString(x, y, s)

    def bullet(s: str, indent=2.2):
        nonlocal y
        for line in simpleSplit(f"- {s}", "Helvetica", 9, w - (indent + 2.0) * cm):
            txt(indent * cm, line, size=9)
            y -= 0.34 * cm

    def heading(s: str):
        nonlocal y
        y -= 0.15 * cm
        txt(2.0 * cm, s, size=12, bold=True)
        y -= 0.45 * cm

    txt(2.0 * cm, payload.get("title", "rowguard"), size=20, bold=True)
    y -= 0.55 * cm
    txt(2.0 * cm, "Allocator Simulation Report", size=12, bold=True)
    y -= 0.45 * cm
    txt(2.0 * cm, f"Date: {payload.get('date_str', '-')}", size=10)
    y -= 0.45 * cm
    c.line(2.0 * cm, y, w - 2.0 * cm, y)
    y -= 0.45 * cm

    config = payload.get("config", {})
    if config:
        heading("Run Configuration")
        for k, v in config.items():
            bullet(f"{k}: {v}")

    if payload.get("section_status"):
        heading("Checks")
        for sec in payload["section_status"]:
            txt(2.0 * cm, f"{sec.get('title', '')}: {sec.get('level', '')}", size=10, bold=True)
            y -= 0.40 * cm
            for d in sec.get("details", [])[:4]:
                bullet(d)
            y -= 0.10 * cm

    if payload.get("numbers"):
        heading("Key Numbers")
        for k, v in payload["numbers"].items():
            if isinstance(v, float):
                v = f"{v:.4f}"
            txt(2.2 * cm, f"{k}: {v}", size=9)
            y -= 0.32 * cm

    rows = payload.get("comparison", [])
    if rows:
        heading("Comparison")
        cols = list(rows[0].keys())
        width = (w - 4.0 * cm) / len(cols)
        for i, col in enumerate(cols):
            txt(2.0 * cm + i * width, str(col)[:18], size=7, bold=True)
        y -= 0.36 * cm
        for row in rows:
            for i, col in enumerate(cols):
                txt(2.0 * cm + i * width, str(row.get(col, ""))[:18], size=8)
            y -= 0.32 * cm

    heading("Recommendations")
    recs = payload.get("recommendations") or ["No action suggested for this run."]
    for r in recs[:10]:
        bullet(r)

    c.showPage()
    c.save()
    buf.seek(0)
    return buf.getvalue()


def now_date_str():
    return datetime.now().strftime("%Y-%m-%d %H:%M")
