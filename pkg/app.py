"""
Dashboard for sperm-head morphology runs.
A Streamlit view over a run directory written by the CLI: fold metrics with mean ± std,
pretraining and tuning loss curves, pseudo-mask statistics, overlay images and Excel export.
"""

from pathlib import Path

import streamlit as st
import yaml

from imgcore import read_png
from report import export_summary_excel, fold_metrics_figure, load_run, loss_curve_figure, mask_iou_figure
from utils import SpermAidError


def initialize_global_session_state():
    """
    Initialisera session state för dashboarden

    How to modify:
    - Ändra standardkatalogen genom att ändra run_dir
    """
    if 'app_initialized' not in st.session_state:
        st.session_state.app_initialized = True
        st.session_state.run_dir = "runs"


# Bakgrund, paneler, kanter och accent; samma accent som CURVE_COLORS[0] i report.py
THEME = {"bg": "#0f0f0f", "panel": "#1a1a1a", "input": "#333333", "edge": "#555555",
         "accent": "#ff6b35", "accent_hover": "#e55a2b", "text": "#ffffff"}


def apply_dark_mode_css(theme=THEME):
    """
    Mörkt tema för dashboarden

    How to modify:
    - Ändra färger i THEME; selektorerna nedan läser bara därifrån
    """
    t = theme
    st.markdown(f"""
    <style>
    .stApp, .main .block-container, header[data-testid="stHeader"] {{ background-color: {t['bg']} !important; }}
    header[data-testid="stHeader"] {{ height: 0px; }}
    .stSidebar, .js-plotly-plot, div[data-testid="metric-container"] {{ background-color: {t['panel']} !important; }}
    div[data-testid="metric-container"] {{ border: 1px solid {t['input']}; border-radius: 8px; padding: 12px; }}
    .stTabs [data-baseweb="tab"] {{ background-color: {t['input']}; border: 1px solid {t['edge']}; border-radius: 5px; }}
    .stTabs [aria-selected="true"] {{ background-color: {t['accent']} !important; }}
    .stTextInput input {{ background-color: {t['input']} !important; border: 1px solid {t['edge']} !important; }}
    .stButton button, .stDownloadButton button {{ background-color: {t['accent']}; border: none; }}
    .stButton button:hover, .stDownloadButton button:hover {{ background-color: {t['accent_hover']}; }}
    h1, h2, h3, p, span, label, input, .stApp {{ color: {t['text']} !important; }}
    </style>
    """, unsafe_allow_html=True)


@st.cache_data(show_spinner=False)
def cached_run(run_dir):
    return load_run(run_dir)


def show_results_tab(run):
    """
    Resultat per del och sammanfattning med export

    How to modify:
    - Lägg till fler nyckeltal i kolumnraden
    """
    metrics, summary = run["metrics"], run["summary"]
    if summary is None:
        st.info("💡 Inga eval/metrics.csv ännu. Kör 'spermaid eval' eller 'spermaid run-all'.")
        return

    cols = st.columns(len(summary))
    for col, row in zip(cols, summary.itertuples(index=False)):
        col.metric(row.metric.capitalize(), f"{row.mean:.3f}", f"± {row.std:.3f}", delta_color="off")

    col1, col2 = st.columns([1, 1])
    with col1:
        st.subheader("📋 Mått per del")
        st.dataframe(metrics, use_container_width=True, hide_index=True)
        st.download_button(
            label="📁 Exportera sammanfattning till Excel",
            data=export_summary_excel(metrics, summary),
            file_name="sammanfattning.xlsx",
            mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
        )
    with col2:
        st.subheader("📈 Stapeldiagram")
        chart = fold_metrics_figure(metrics)
        if chart:
            st.plotly_chart(chart, use_container_width=True)


def show_loss_tab(run):
    pretrain, tune = run["pretrain_loss"], run["tune_loss"]
    if len(pretrain):
        st.plotly_chart(loss_curve_figure(pretrain, x="iteration", columns=("seg", "con", "rot"),
                                          title="Förträning: segmentering, konsistens och rotation"),
                        use_container_width=True)
    else:
        st.info("💡 Ingen förträning i denna körning (t.ex. --skip-pretrain).")
    if len(tune):
        st.plotly_chart(loss_curve_figure(tune, x="epoch", columns=("loss",), title="Finjustering: mjuk korsentropi"),
                        use_container_width=True)
        if tune["val_accuracy"].notna().any():
            st.plotly_chart(loss_curve_figure(tune, x="epoch", columns=("val_accuracy",),
                                              title="Valideringsnoggrannhet"),
                            use_container_width=True)


def show_masks_tab(run):
    """
    Pseudomaskstatistik och överlagringsbilder

    How to modify:
    - Ändra antal bilder per rad med n_cols
    """
    masks = run["masks"]
    if masks is None:
        st.info("💡 Inga pseudomasker hittades (masks.jsonl saknas).")
    else:
        flagged = int(masks["flags"].map(len).gt(0).sum())
        col1, col2, col3 = st.columns(3)
        col1.metric("Utsnitt", len(masks))
        col2.metric("Flaggade", flagged)
        if "iou_head" in masks.columns:
            col3.metric("Medel-IoU mot sant huvud", f"{masks['iou_head'].mean():.3f}")
            st.plotly_chart(mask_iou_figure(masks), use_container_width=True)

    overlays = run["overlays"]
    if overlays:
        st.subheader("🖼️ Utsnitt, masklager och lärarmask")
        n_cols = 4
        for start in range(0, len(overlays), n_cols):
            cols = st.columns(n_cols)
            for col, path in zip(cols, overlays[start:start + n_cols]):
                col.image(read_png(path), caption=f"{path.parent.parent.name}/{path.stem}",
                          use_container_width=True, clamp=True)


def main():
    """
    Huvudfunktion som koordinerar dashboarden

    How to modify:
    - Lägg till fler flikar genom att utöka tabs-listan
    """
    st.set_page_config(
        page_title="Spermiehuvud-morfologi",
        page_icon="🧬",
        layout="wide",
        initial_sidebar_state="auto"
    )
    initialize_global_session_state()
    apply_dark_mode_css()

    st.title("🧬 Morfologiklassning av spermiehuvuden")
    st.markdown("""
    ### Resultat från pseudomasker, destillation och mjuk finjustering

    ---
    """)

    with st.sidebar:
        st.subheader("📂 Körkatalog")
        st.session_state.run_dir = st.text_input("Katalog skriven av spermaid", st.session_state.run_dir)
        if st.button("🔄 Läs om", help="Töm cachen och läs katalogen igen"):
            cached_run.clear()
            st.rerun()
        st.markdown("---")
        st.subheader("ℹ️ Om dashboarden")
        st.markdown("""
        **Visar:**
        - Mått per del med medel ± std
        - Förlustkurvor för förträning och finjustering
        - Pseudomasker och lärarmasker
        """)
        st.caption("Version 1.0 | Powered by Streamlit")

    try:
        run = cached_run(str(Path(st.session_state.run_dir)))
    except SpermAidError as e:
        st.error(f"❌ Kunde inte läsa körningen: {str(e)}")
        st.info("💡 Ange katalogen som gavs till --out.")
        return

    tabs = st.tabs(["📋 Resultat", "📉 Förlustkurvor", "🧬 Pseudomasker", "⚙️ Konfiguration"])
    with tabs[0]:
        try:
            show_results_tab(run)
        except Exception as e:
            st.error(f"❌ Fel i resultatvyn: {str(e)}")
    with tabs[1]:
        try:
            show_loss_tab(run)
        except Exception as e:
            st.error(f"❌ Fel i förlustvyn: {str(e)}")
    with tabs[2]:
        try:
            show_masks_tab(run)
        except Exception as e:
            st.error(f"❌ Fel i maskvyn: {str(e)}")
    with tabs[3]:
        if run["config"] is None:
            st.info("💡 Ingen config.yaml hittades.")
        else:
            st.code(yaml.safe_dump(run["config"], sort_keys=True, allow_unicode=True), language="yaml")


if __name__ == "__main__":
    main()
