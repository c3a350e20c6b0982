import logging
import os
from datetime import datetime
from typing import Dict, List, Optional
from xml.sax.saxutils import escape

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import mm
from reportlab.pdfbase import pdfmetrics
from reportlab.pdfbase.ttfonts import TTFont
from reportlab.platypus import PageBreak, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

logger = logging.getLogger(__name__)

FONT_CANDIDATES = [
    "/usr/share/fonts/opentype/ipafont-gothic/ipag.ttf",
    "/usr/share/fonts/truetype/fonts-japanese-gothic.ttf",
    r"C:\Windows\Fonts\msgothic.ttc",
    r"C:\Windows\Fonts\meiryo.ttc",
]
MAX_TABLE_ROWS = 60


class PDFGenerator:
    """ベンチマーク結果の要約 PDF (指標表と収束診断表) を作ります"""

    def __init__(self):
        self.font_name = self.setup_fonts()
        self.styles = getSampleStyleSheet()
        self.setup_custom_styles()

    def setup_fonts(self) -> str:
        for font_path in FONT_CANDIDATES:
            if not os.path.exists(font_path):
                continue
            try:
                pdfmetrics.registerFont(TTFont('JapaneseFont', font_path))
                return 'JapaneseFont'
            except Exception as e:
                logger.debug(f"フォントを登録できませんでした: {font_path}: {e}")
        logger.info("日本語フォントが見つからないため Helvetica を使用します")
        return 'Helvetica'

    def setup_custom_styles(self) -> None:
        self.title_style = ParagraphStyle(
            'CustomTitle',
            parent=self.styles['Heading1'],
            fontName=self.font_name,
            fontSize=18,
            spaceAfter=20,
            alignment=TA_CENTER,
        )
        self.heading_style = ParagraphStyle(
            'CustomHeading',
            parent=self.styles['Heading2'],
            fontName=self.font_name,
            fontSize=13,
            spaceAfter=10,
            spaceBefore=14,
            textColor=colors.darkblue,
        )
        self.normal_style = ParagraphStyle(
            'CustomNormal',
            parent=self.styles['Normal'],
            fontName=self.font_name,
            fontSize=9,
            leading=12,
        )

    def _table(self, df: pd.DataFrame) -> Table:
        shown = df.head(MAX_TABLE_ROWS)
        data = [list(map(str, shown.columns))]
        for row in shown.itertuples(index=False):
            data.append([_cell(value) for value in row])
        table = Table(data, repeatRows=1)
        table.setStyle(TableStyle([
            ('FONTNAME', (0, 0), (-1, -1), self.font_name),
            ('FONTSIZE', (0, 0), (-1, -1), 7),
            ('BACKGROUND', (0, 0), (-1, 0), colors.lightgrey),
            ('GRID', (0, 0), (-1, -1), 0.4, colors.grey),
            ('ALIGN', (1, 1), (-1, -1), 'RIGHT'),
            ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
        ]))
        return table

    def generate_summary_pdf(self, output_path: str, title: str,
                             summaries: Dict[str, pd.DataFrame],
                             diagnostics: pd.DataFrame,
                             comparisons: Optional[Dict[str, pd.DataFrame]] = None,
                             notes: Optional[List[str]] = None) -> bool:
        try:
            doc = SimpleDocTemplate(
                output_path,
                pagesize=A4,
                rightMargin=15 * mm,
                leftMargin=15 * mm,
                topMargin=15 * mm,
                bottomMargin=15 * mm,
            )
            story = [
                Paragraph(escape(title), self.title_style),
                Paragraph(f"generated {datetime.now().strftime('%Y-%m-%d %H:%M')}", self.normal_style),
                Spacer(1, 10),
            ]
            for note in notes or []:
                story.append(Paragraph(escape(note), self.normal_style))

            for name, df in summaries.items():
                story.append(Paragraph(f"{escape(name)} (mean ± SD)", self.heading_style))
                story.append(self._table(df) if not df.empty else Paragraph("-", self.normal_style))

            story.append(PageBreak())
            story.append(Paragraph("MCMC diagnostics", self.heading_style))
            story.append(self._table(diagnostics) if not diagnostics.empty
                         else Paragraph("-", self.normal_style))

            for name, df in (comparisons or {}).items():
                story.append(Paragraph(escape(name), self.heading_style))
                story.append(self._table(df))

            doc.build(story)
            return True
        except Exception as e:
            logger.error(f"PDF生成エラー: {e}")
            return False


def _cell(value) -> str:
    if isinstance(value, float):
        if value != value:
            return "-"
        return f"{value:.4g}"
    return str(value)
