#pragma once

// Bridge to an out-of-process in-context model over a line-delimited JSON
// protocol on the child's stdin/stdout.
//
//   request:  {"context": [[[x...], y], ...], "query": [x...]}
//   response: {"prediction": v}
//
// One response per request, in order. POSIX only.

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/io.hpp"
#include "imctx/predict.hpp"

namespace imctx {

struct ExternalPredictorConfig {
    std::string command;
    std::vector<std::string> args;
    std::filesystem::path working_dir;
    /// Model input width; prompts wider than this are chunk-ensembled.
    std::size_t input_dim = 20;
    double timeout_s = 30.0;

    static ExternalPredictorConfig from_json(const nlohmann::json& j) {
        ExternalPredictorConfig c;
        try {
            c.command = j.at("command").get<std::string>();
            if (j.contains("args")) c.args = j.at("args").get<std::vector<std::string>>();
            if (j.contains("working_dir")) c.working_dir = j.at("working_dir").get<std::string>();
            if (j.contains("input_dim")) c.input_dim = j.at("input_dim").get<std::size_t>();
            if (j.contains("timeout_s")) c.timeout_s = j.at("timeout_s").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("malformed external predictor config: ") + e.what());
        }
        if (c.command.empty()) throw UsageError("external predictor config needs a command");
        if (c.input_dim == 0) throw UsageError("external predictor input_dim must be positive");
        if (!(c.timeout_s > 0.0)) throw UsageError("external predictor timeout must be positive");
        return c;
    }

    static ExternalPredictorConfig load(const std::filesystem::path& path) {
        try {
            auto c = from_json(nlohmann::json::parse(read_file(path)));
            if (c.working_dir.empty()) c.working_dir = path.parent_path();
            return c;
        } catch (const nlohmann::json::parse_error& e) {
            throw UsageError(path.string() + ": " + e.what());
        }
    }
};

inline std::string encode_request(const Prompt& p) {
    nlohmann::json j;
    j["context"] = nlohmann::json::array();
    for (std::size_t i = 0; i < p.size(); ++i) j["context"].push_back(nlohmann::json::array({p.xs[i], p.ys[i]}));
    j["query"] = p.query;
    return j.dump();
}

inline Prompt decode_request(const std::string& line) {
    auto j = nlohmann::json::parse(line);
    Prompt p;
    for (const auto& pair : j.at("context")) {
        p.xs.push_back(pair.at(0).get<Vector>());
        p.ys.push_back(pair.at(1).get<double>());
    }
    p.query = j.at("query").get<Vector>();
    return p;
}

inline std::string encode_response(double v) {
    nlohmann::json j;
    j["prediction"] = v;
    return j.dump();
}

/// Parses one response line; `line_no` is 1-based and used in diagnostics.
inline double decode_response(const std::string& line, std::size_t line_no) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw RuntimeError("external predictor protocol error at response line " + std::to_string(line_no) +
                           ": not JSON: " + line);
    }
    if (!j.is_object() || !j.contains("prediction") || !j["prediction"].is_number())
        throw RuntimeError("external predictor protocol error at response line " + std::to_string(line_no) +
                           ": expected {\"prediction\": number}, got " + line);
    double v = j["prediction"].get<double>();
    if (!std::isfinite(v))
        throw RuntimeError("external predictor protocol error at response line " + std::to_string(line_no) +
                           ": non-finite prediction");
    return v;
}

/// One child process; requests are strictly sequential. Not thread-safe:
/// use one instance per worker.
class ExternalPredictor {
public:
    explicit ExternalPredictor(ExternalPredictorConfig config) : config_(std::move(config)) { spawn(); }

    ExternalPredictor(const ExternalPredictor&) = delete;
    ExternalPredictor& operator=(const ExternalPredictor&) = delete;

    ~ExternalPredictor() { shutdown(true); }

    const ExternalPredictorConfig& config() const { return config_; }

    double predict_one(const Prompt& p) {
        if (pid_ <= 0) throw RuntimeError("external predictor is not running");
        write_line(encode_request(p));
        ++responses_;
        return decode_response(read_line(), responses_);
    }

    /// Each prompt is chunk-ensembled at the configured input width.
    std::vector<Prediction> predict(const std::vector<Prompt>& prompts) {
        std::vector<Prediction> out;
        out.reserve(prompts.size());
        ContextPredictor base = [this](const Prompt& p) {
            return Prediction{predict_one(p), std::nullopt, "external"};
        };
        for (const auto& p : prompts) out.push_back(chunk_ensemble(base, p, config_.input_dim));
        return out;
    }

    /// Closes the child's stdin and waits; throws on non-zero exit.
    void finish() { shutdown(false); }

    const std::string& diagnostics() const { return stderr_; }

private:
    void spawn() {
        int in_pipe[2], out_pipe[2], err_pipe[2];
        if (pipe2(in_pipe, O_CLOEXEC) != 0 || pipe2(out_pipe, O_CLOEXEC) != 0 || pipe2(err_pipe, O_CLOEXEC) != 0)
            throw RuntimeError(std::string("pipe failed: ") + std::strerror(errno));
        pid_ = fork();
        if (pid_ < 0) throw RuntimeError(std::string("fork failed: ") + std::strerror(errno));
        if (pid_ == 0) {
            dup2(in_pipe[0], STDIN_FILENO);
            dup2(out_pipe[1], STDOUT_FILENO);
            dup2(err_pipe[1], STDERR_FILENO);
            for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) close(fd);
            if (!config_.working_dir.empty() && chdir(config_.working_dir.c_str()) != 0) _exit(126);
            std::vector<char*> argv;
            argv.push_back(const_cast<char*>(config_.command.c_str()));
            for (auto& a : config_.args) argv.push_back(const_cast<char*>(a.c_str()));
            argv.push_back(nullptr);
            execvp(argv[0], argv.data());
            std::fprintf(stderr, "exec failed: %s: %s\n", config_.command.c_str(), std::strerror(errno));
            _exit(127);
        }
        close(in_pipe[0]);
        close(out_pipe[1]);
        close(err_pipe[1]);
        to_child_ = in_pipe[1];
        from_child_ = out_pipe[0];
        err_child_ = err_pipe[0];
        fcntl(from_child_, F_SETFL, fcntl(from_child_, F_GETFL) | O_NONBLOCK);
        fcntl(err_child_, F_SETFL, fcntl(err_child_, F_GETFL) | O_NONBLOCK);
        std::signal(SIGPIPE, SIG_IGN);
    }

    void write_line(const std::string& line) {
        std::string buf = line + "\n";
        std::size_t off = 0;
        while (off < buf.size()) {
            auto n = ::write(to_child_, buf.data() + off, buf.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                fail("cannot write request " + std::to_string(responses_ + 1));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    void drain_stderr() {
        char buf[4096];
        while (true) {
            auto n = ::read(err_child_, buf, sizeof(buf));
            if (n <= 0) break;
            if (stderr_.size() < 65536) stderr_.append(buf, static_cast<std::size_t>(n));
        }
    }

    std::string read_line() {
        using clock = std::chrono::steady_clock;
        const auto deadline = clock::now() + std::chrono::duration<double>(config_.timeout_s);
        while (true) {
            auto nl = pending_.find('\n');
            if (nl != std::string::npos) {
                std::string line = pending_.substr(0, nl);
                pending_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                return line;
            }
            auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
            if (remaining <= 0) fail("timed out after " + format_double(config_.timeout_s) + " s waiting for response " +
                                     std::to_string(responses_));
            pollfd fds[2] = {{from_child_, POLLIN, 0}, {err_child_, POLLIN, 0}};
            int r = poll(fds, 2, static_cast<int>(remaining));
            if (r < 0 && errno != EINTR) fail("poll failed");
            if (fds[1].revents) drain_stderr();
            if (fds[0].revents & (POLLIN | POLLHUP)) {
                char buf[8192];
                auto n = ::read(from_child_, buf, sizeof(buf));
                if (n > 0) {
                    pending_.append(buf, static_cast<std::size_t>(n));
                } else if (n == 0) {
                    fail("child closed its output before response " + std::to_string(responses_));
                }
            }
        }
    }

    [[noreturn]] void fail(const std::string& what) {
        drain_stderr();
        std::string msg = "external predictor '" + config_.command + "': " + what;
        int status = reap(true);
        if (status >= 0 && WIFEXITED(status) && WEXITSTATUS(status) != 0)
            msg += " (exit code " + std::to_string(WEXITSTATUS(status)) + ")";
        if (!stderr_.empty()) msg += "; stderr: " + stderr_;
        throw RuntimeError(msg);
    }

    /// Returns the wait status, or −1 if there was no child.
    int reap(bool kill_it) {
        if (pid_ <= 0) return -1;
        if (to_child_ >= 0) {
            close(to_child_);
            to_child_ = -1;
        }
        int status = 0;
        if (kill_it) {
            // Give the child a moment to exit on EOF before killing it.
            for (int i = 0; i < 20; ++i) {
                if (waitpid(pid_, &status, WNOHANG) == pid_) {
                    pid_ = -1;
                    break;
                }
                usleep(5000);
            }
            if (pid_ > 0) {
                kill(pid_, SIGKILL);
                waitpid(pid_, &status, 0);
            }
        } else {
            while (true) {
                pollfd fd{err_child_, POLLIN, 0};
                if (poll(&fd, 1, 100) > 0) drain_stderr();
                if (waitpid(pid_, &status, WNOHANG) == pid_) break;
            }
        }
        pid_ = -1;
        drain_stderr();
        for (int* fd : {&from_child_, &err_child_})
            if (*fd >= 0) {
                close(*fd);
                *fd = -1;
            }
        return status;
    }

    void shutdown(bool quiet) {
        if (pid_ <= 0) return;
        int status = reap(quiet);
        if (!quiet && WIFEXITED(status) && WEXITSTATUS(status) != 0) {
            std::string msg = "external predictor '" + config_.command + "' exited with code " +
                              std::to_string(WEXITSTATUS(status));
            if (!stderr_.empty()) msg += "; stderr: " + stderr_;
            throw RuntimeError(msg);
        }
        if (!quiet && WIFSIGNALED(status))
            throw RuntimeError("external predictor '" + config_.command + "' killed by signal " +
                               std::to_string(WTERMSIG(status)));
    }

    ExternalPredictorConfig config_;
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    int err_child_ = -1;
    std::string pending_;
    std::string stderr_;
    std::size_t responses_ = 0;
};

/// Runs all prompts through one child process and checks its exit status.
inline std::vector<Prediction> external_predict(const ExternalPredictorConfig& config,
                                                const std::vector<Prompt>& prompts) {
    ExternalPredictor child(config);
    auto out = child.predict(prompts);
    child.finish();
    return out;
}

}  // namespace imctx
