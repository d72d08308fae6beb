// Writes the randomly generated fixture models (and a matching input) into a
// directory. The hand-written fixtures live next to them in the repository.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cnncert/fixtures.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures DIR\n";
    return 64;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir);
  const auto suite = cnncert::fixture_suite(6, 2019);
  for (const auto& f : suite) {
    std::ofstream(dir / ("random-" + f.name + ".json")) << cnncert::save_model(f.net) << '\n';
  }
  std::ofstream(dir / "random-input-8x8.json")
      << cnncert::save_input(cnncert::random_input({8, 8, 1}, 3)) << '\n';
  return 0;
}
