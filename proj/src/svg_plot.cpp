#include "calm/svg_plot.hpp"

#include "calm/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace calm {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 480.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 30.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 60.0;

double px(double cosine) { return kLeft + (std::clamp(cosine, -1.0, 1.0) + 1.0) / 2.0 * (kWidth - kLeft - kRight); }
double py(double accuracy) { return kHeight - kBottom - std::clamp(accuracy, 0.0, 1.0) * (kHeight - kTop - kBottom); }

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_alignment_scatter(const std::vector<ScatterPoint>& points, double ceiling_accuracy,
                                     const std::string& title) {
  if (points.empty()) throw ValidationError("EmptyCompare", "no plottable rows in the compare output");
  std::string s;
  s += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0:.0f}\" height=\"{1:.0f}\" viewBox=\"0 0 {0:.0f} {1:.0f}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      kWidth, kHeight);
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{:.0f}\" height=\"{:.0f}\" fill=\"white\"/>\n", kWidth, kHeight);
  s += fmt::format("<text x=\"{:.1f}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", kWidth / 2.0,
                   escape(title));

  // Axes and ticks.
  s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", px(-1.0),
                   py(0.0), px(1.0));
  s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", px(-1.0),
                   py(0.0), py(1.0));
  for (int k = 0; k <= 4; ++k) {
    const double v = -1.0 + 0.5 * k;
    s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", px(v),
                     py(0.0), py(0.0) + 5.0);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.1f}</text>\n", px(v), py(0.0) + 19.0, v);
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = 0.25 * k;
    s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n",
                     px(-1.0) - 5.0, py(v), px(-1.0));
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n", px(-1.0) - 8.0, py(v) + 4.0,
                     v);
  }
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">Policy alignment (cosine similarity)</text>\n",
                   (px(-1.0) + px(1.0)) / 2.0, kHeight - 18.0);
  s += fmt::format(
      "<text x=\"18\" y=\"{0:.1f}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0:.1f})\">Output accuracy</text>\n",
      (py(0.0) + py(1.0)) / 2.0);

  // Ceiling at the benchmark's cross-validated accuracy.
  s += fmt::format(
      "<line class=\"ceiling\" x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"gray\" "
      "stroke-dasharray=\"2,4\" data-accuracy=\"{3:.6f}\"/>\n",
      px(-1.0), py(ceiling_accuracy), px(1.0), ceiling_accuracy);
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\" fill=\"gray\">benchmark ceiling {:.3f}</text>\n",
                   px(1.0), py(ceiling_accuracy) - 6.0, ceiling_accuracy);

  for (const auto& p : points) {
    s += fmt::format("<circle class=\"point\" cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"steelblue\"/>\n", px(p.cosine),
                     py(p.accuracy));
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"10\">{}</text>\n", px(p.cosine) + 6.0,
                     py(p.accuracy) - 6.0, escape(p.label));
  }
  s += "</svg>\n";
  return s;
}

}  // namespace calm
