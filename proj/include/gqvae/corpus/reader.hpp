#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gqvae/core/error.hpp"

namespace gqvae::corpus {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Reads a UTF-8 file or every regular file under a directory (sorted by
/// path). Each file is one document; with `split_lines` every non-empty line
/// is its own document.
inline std::vector<std::string> read_corpus(const std::filesystem::path& path,
                                            bool split_lines = false) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw IoError("corpus path does not exist: " + path.string());
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::vector<std::string> docs;
  for (const auto& f : files) {
    std::string text = read_file(f);
    if (!split_lines) {
      if (!text.empty()) docs.push_back(std::move(text));
      continue;
    }
    std::istringstream ls(text);
    std::string line;
    while (std::getline(ls, line)) {
      if (!line.empty()) docs.push_back(line);
    }
  }
  return docs;
}

}  // namespace gqvae::corpus
