#pragma once

// Alignment-versus-accuracy scatter plot as a standalone SVG document.

#include <string>
#include <vector>

namespace calm {

struct ScatterPoint {
  std::string label;
  double cosine = 0.0;    // x, in [-1, 1]
  double accuracy = 0.0;  // y, in [0, 1]
};

/// One mark per point plus a dotted horizontal line at `ceiling_accuracy`.
/// Output bytes depend only on the inputs. Throws
/// ValidationError("EmptyCompare") when `points` is empty.
std::string render_alignment_scatter(const std::vector<ScatterPoint>& points, double ceiling_accuracy,
                                     const std::string& title = "Policy alignment vs. output accuracy");

}  // namespace calm
