// Reference external predictor for the line-delimited protocol. Answers each
// request with the last context label.
//
//   --mode echo       last context label (default)
//   --mode mean       mean of context labels
//   --mode garbage    non-JSON response to the second request
//   --mode nonnumeric {"prediction": "abc"} for every request
//   --mode sleep      never answers
//   --mode fail       writes to stderr and exits 4 after the first request

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>
#include <thread>

#include "imctx/external.hpp"

int main(int argc, char** argv) {
    std::string mode = "echo";
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--mode") mode = argv[i + 1];
    std::string line;
    std::size_t n = 0;
    while (std::getline(std::cin, line)) {
        ++n;
        auto p = imctx::decode_request(line);
        if (mode == "sleep") std::this_thread::sleep_for(std::chrono::hours(1));
        if (mode == "fail") {
            std::fprintf(stderr, "echo_predictor: simulated failure on request %zu\n", n);
            return 4;
        }
        if (mode == "garbage" && n == 2) {
            std::cout << "this is not json" << std::endl;
            continue;
        }
        if (mode == "nonnumeric") {
            std::cout << R"({"prediction":"abc"})" << std::endl;
            continue;
        }
        double v = p.ys.empty() ? 0.0 : p.ys.back();
        if (mode == "mean") {
            v = 0.0;
            for (double y : p.ys) v += y;
            v = p.ys.empty() ? 0.0 : v / static_cast<double>(p.ys.size());
        }
        std::cout << imctx::encode_response(v) << std::endl;
    }
    return 0;
}
