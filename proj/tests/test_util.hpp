#pragma once

#include <filesystem>
#include <string>

inline std::string test_dir() {
  const auto p = std::filesystem::temp_directory_path() / "dcrl_tests";
  std::filesystem::create_directories(p);
  return p.string();
}
