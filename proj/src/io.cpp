#include "calm/io.hpp"

#include "calm/errors.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

namespace calm {

std::string format_exact(double value) { return fmt::format("{:.17g}", value); }

std::string format_real(double value) { return fmt::format("{:.10g}", value); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("FileNotFound", "cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("WriteFailed", "cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw UsageError("WriteFailed", "short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string dump_json(const nlohmann::json& value) { return value.dump(2) + "\n"; }

}  // namespace calm
