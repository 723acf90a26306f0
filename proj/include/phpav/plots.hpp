#ifndef PHPAV_PLOTS_HPP
#define PHPAV_PLOTS_HPP

// Accuracy-vs-stage line chart for one task order, rendered as a
// self-contained SVG string. Pure function of the sequence result: no
// randomness, no timestamps, fixed formatting — identical inputs produce
// byte-identical images.

#include <sstream>
#include <string>

#include "phpav/engine.hpp"

namespace phpav {

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

// One polyline per task (from the stage it was learned at through the final
// stage), circle markers at every evaluation, 0-100 accuracy axis.
inline std::string render_accuracy_svg(const SequenceResult& r) {
  const long S = static_cast<long>(r.order.size());
  if (S == 0) throw validation_error("plot: empty sequence result");
  if (r.acc.size() != r.order.size())
    throw validation_error("plot: stage count does not match order length");
  for (long s = 0; s < S; ++s)
    if (static_cast<long>(r.acc[static_cast<size_t>(s)].size()) != s + 1)
      throw validation_error("plot: accuracy matrix is not lower-triangular");

  const double width = 640.0, height = 420.0;
  const double ml = 56.0, mr = 170.0, mt = 40.0, mb = 48.0;
  const double pw = width - ml - mr, ph = height - mt - mb;
  auto x_of = [&](long stage) {  // stage in [1, S]
    if (S == 1) return ml + pw / 2.0;
    return ml + pw * static_cast<double>(stage - 1) / static_cast<double>(S - 1);
  };
  auto y_of = [&](double acc) { return mt + ph * (1.0 - acc / 100.0); };
  static const char* kColors[] = {"#1b6ca8", "#c0392b", "#2e8b57",
                                  "#8e44ad", "#b8860b", "#16808a"};
  const int ncolors = static_cast<int>(sizeof(kColors) / sizeof(kColors[0]));

  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(2);
  ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  ss << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
     << "\" fill=\"#ffffff\"/>\n";
  ss << "  <text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" "
        "fill=\"#202020\">accuracy by stage &#8212; order "
     << detail::xml_escape(order_label(r.order)) << "</text>\n";

  // horizontal gridlines + y tick labels every 20 points
  for (int tick = 0; tick <= 100; tick += 20) {
    double y = y_of(static_cast<double>(tick));
    ss << "  <line x1=\"" << ml << "\" y1=\"" << y << "\" x2=\"" << ml + pw << "\" y2=\"" << y
       << "\" stroke=\"#d8d8d8\" stroke-width=\"1\"/>\n";
    ss << "  <text x=\"" << ml - 8 << "\" y=\"" << y + 4
       << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#404040\" "
          "text-anchor=\"end\">"
       << tick << "</text>\n";
  }
  // x tick labels: stage number plus the task trained at that stage
  for (long s = 1; s <= S; ++s) {
    double x = x_of(s);
    ss << "  <line x1=\"" << x << "\" y1=\"" << mt + ph << "\" x2=\"" << x << "\" y2=\""
       << mt + ph + 5 << "\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
    ss << "  <text x=\"" << x << "\" y=\"" << mt + ph + 20
       << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#404040\" "
          "text-anchor=\"middle\">"
       << s << ": " << detail::xml_escape(r.order[static_cast<size_t>(s - 1)]) << "</text>\n";
  }
  ss << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
     << "\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
  ss << "  <line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
     << mt + ph << "\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
  ss << "  <text x=\"18\" y=\"" << mt + ph / 2
     << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#404040\" "
        "text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << mt + ph / 2 << ")\">accuracy (%)</text>\n";

  // task curves: task j is first evaluated at stage j+1
  for (long j = 0; j < S; ++j) {
    const char* color = kColors[j % ncolors];
    if (S - j >= 2) {
      ss << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (long s = j; s < S; ++s) {
        if (s > j) ss << " ";
        ss << x_of(s + 1) << "," << y_of(r.acc[static_cast<size_t>(s)][static_cast<size_t>(j)]);
      }
      ss << "\"/>\n";
    }
    for (long s = j; s < S; ++s) {
      ss << "  <circle cx=\"" << x_of(s + 1) << "\" cy=\""
         << y_of(r.acc[static_cast<size_t>(s)][static_cast<size_t>(j)]) << "\" r=\"3\" fill=\""
         << color << "\"/>\n";
    }
    double ly = mt + 14.0 + 20.0 * static_cast<double>(j);
    ss << "  <rect x=\"" << ml + pw + 16 << "\" y=\"" << ly - 9
       << "\" width=\"14\" height=\"4\" fill=\"" << color << "\"/>\n";
    ss << "  <text x=\"" << ml + pw + 36 << "\" y=\"" << ly
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#202020\">"
       << detail::xml_escape(r.order[static_cast<size_t>(j)]) << "</text>\n";
  }
  ss << "</svg>\n";
  return ss.str();
}

}  // namespace phpav

#endif
