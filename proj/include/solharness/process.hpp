#pragma once

// Minimal POSIX subprocess runner: argv-style exec (no shell), captured
// stdout/stderr, working directory, and a hard wall-clock timeout enforced
// with SIGKILL. Used by the verifier adapters.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "solharness/model.hpp"

namespace solharness {

struct SubprocessResult {
    int exit_code = -1;
    bool timed_out = false;
    std::string stdout_text;
    std::string stderr_text;
};

// PATH lookup mirroring execvp: names with a slash are checked directly.
inline std::optional<std::filesystem::path> find_executable(const std::string& name) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (name.find('/') != std::string::npos) {
        const fs::path p(name);
        if (fs::is_regular_file(p, ec) && ::access(p.c_str(), X_OK) == 0) return p;
        return std::nullopt;
    }
    const char* path_env = std::getenv("PATH");
    if (path_env == nullptr) return std::nullopt;
    std::string paths(path_env);
    std::size_t start = 0;
    while (start <= paths.size()) {
        const std::size_t end = std::min(paths.find(':', start), paths.size());
        const std::string dir = paths.substr(start, end - start);
        if (!dir.empty()) {
            const fs::path candidate = fs::path(dir) / name;
            if (fs::is_regular_file(candidate, ec) && ::access(candidate.c_str(), X_OK) == 0) {
                return candidate;
            }
        }
        start = end + 1;
    }
    return std::nullopt;
}

inline SubprocessResult run_subprocess(const std::vector<std::string>& argv,
                                       const std::filesystem::path& cwd,
                                       std::chrono::milliseconds timeout) {
    if (argv.empty()) throw Error("run_subprocess: empty argv");

    int out_pipe[2], err_pipe[2];
    if (::pipe(out_pipe) != 0 || ::pipe(err_pipe) != 0) {
        throw Error("run_subprocess: pipe() failed");
    }

    const pid_t pid = ::fork();
    if (pid < 0) throw Error("run_subprocess: fork() failed");

    if (pid == 0) {
        ::setpgid(0, 0);  // own process group so a timeout kill reaches grandchildren
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::dup2(err_pipe[1], STDERR_FILENO);
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        ::close(err_pipe[0]);
        ::close(err_pipe[1]);
        if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) _exit(126);
        std::vector<char*> args;
        args.reserve(argv.size() + 1);
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        ::execvp(args[0], args.data());
        _exit(127);
    }

    ::setpgid(pid, pid);  // both sides set it to close the race
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);

    SubprocessResult result;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    struct pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
    std::string* sinks[2] = {&result.stdout_text, &result.stderr_text};
    bool open[2] = {true, true};
    char buf[8192];

    while (open[0] || open[1]) {
        const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        if (remaining.count() <= 0 && !result.timed_out) {
            result.timed_out = true;
            ::kill(-pid, SIGKILL);  // whole process group
        }
        const int wait_ms = result.timed_out
                                ? 1000  // child is dying; drain what remains
                                : static_cast<int>(std::min<long long>(remaining.count(), 1000));
        const int rc = ::poll(fds, 2, std::max(wait_ms, 0));
        if (rc < 0 && errno != EINTR) break;
        for (int i = 0; i < 2; ++i) {
            if (!open[i]) continue;
            if (fds[i].revents & (POLLIN | POLLHUP)) {
                const ssize_t n = ::read(fds[i].fd, buf, sizeof(buf));
                if (n > 0) {
                    sinks[i]->append(buf, static_cast<std::size_t>(n));
                } else if (n == 0) {
                    open[i] = false;
                    fds[i].fd = -1;
                }
            } else if (fds[i].revents & (POLLERR | POLLNVAL)) {
                open[i] = false;
                fds[i].fd = -1;
            }
        }
        if (result.timed_out && rc == 0) break;  // killed and drained
    }

    ::close(out_pipe[0]);
    ::close(err_pipe[0]);

    int status = 0;
    if (::waitpid(pid, &status, 0) == pid) {
        if (WIFEXITED(status)) {
            result.exit_code = WEXITSTATUS(status);
        } else if (WIFSIGNALED(status)) {
            result.exit_code = 128 + WTERMSIG(status);
        }
    }
    return result;
}

}  // namespace solharness
