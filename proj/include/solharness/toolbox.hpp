#pragma once

// Sandboxed tools the refining agent can invoke: directory listing and file
// reading under a security policy. Every path is canonicalized and contained
// under the policy root; deny patterns (test suites, reference solutions)
// always win; noise patterns hide build artifacts from listings. Dispatch
// converts every failure into a tool message — errors are feedback for the
// agent, not control flow for the loop.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "solharness/glob.hpp"
#include "solharness/llm.hpp"
#include "solharness/model.hpp"

namespace solharness {

class PathEscapeError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class DeniedError : public Error {
public:
    using Error::Error;
};

class BinaryFileError : public Error {
public:
    using Error::Error;
};

inline std::vector<std::string> default_noise_patterns() {
    // Standard Foundry/npm artifacts; "x/**" also matches "x" itself because
    // "**" spans zero or more components.
    return {"out/**", "cache/**", "broadcast/**", "node_modules/**", ".git/**"};
}

struct SandboxPolicy {
    std::filesystem::path root;
    std::vector<std::string> deny_patterns;
    std::vector<std::string> noise_patterns = default_noise_patterns();
    std::uint64_t max_read_bytes = 64 * 1024;
};

namespace detail {

struct ResolvedPath {
    std::filesystem::path absolute;
    std::string relative;  // canonical, '/'-separated, for pattern matching
};

// Canonicalizes and confines a tool-supplied path. Symlinks are resolved
// before the containment check, so a link pointing outside the root is a
// path escape, and deny matching sees the real location of the target.
inline ResolvedPath resolve_in_sandbox(const std::string& rel_path,
                                       const SandboxPolicy& policy) {
    namespace fs = std::filesystem;
    fs::path rel(rel_path);
    if (rel.is_absolute()) {
        throw PathEscapeError("absolute paths are not allowed: " + rel_path);
    }
    std::error_code ec;
    const fs::path root = fs::weakly_canonical(policy.root, ec);
    if (ec) throw NotFoundError("sandbox root unavailable: " + policy.root.string());
    // weakly_canonical folds ".." after a nonexistent component lexically,
    // which can uncover a symlink the same pass never resolved (for example
    // "missing/../link"). Iterate to a fixed point so the containment check
    // below sees the real target, not an alias for it.
    fs::path joined = root / rel;
    for (int pass = 0; pass < 4; ++pass) {
        const fs::path next = fs::weakly_canonical(joined, ec);
        if (ec) throw PathEscapeError("cannot resolve path: " + rel_path);
        if (next == joined) break;
        joined = next;
    }
    if (!path_under(root, joined)) {
        throw PathEscapeError("path escapes the sandbox root: " + rel_path);
    }
    ResolvedPath out;
    out.absolute = joined;
    out.relative = joined.lexically_relative(root).generic_string();
    if (out.relative == ".") out.relative.clear();
    return out;
}

// The literal request and the canonical target must both clear the deny
// list, so neither alias games the policy.
inline void check_denied(const std::string& requested, const ResolvedPath& resolved,
                         const SandboxPolicy& policy) {
    const std::string literal =
        std::filesystem::path(requested).lexically_normal().generic_string();
    if (matches_any(policy.deny_patterns, resolved.relative) ||
        matches_any(policy.deny_patterns, literal)) {
        throw DeniedError("access denied by sandbox policy: " + requested);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// list_directory

enum class EntryKind { file, dir };

struct DirEntry {
    std::string name;
    EntryKind kind = EntryKind::file;
    std::uint64_t size_bytes = 0;

    friend bool operator==(const DirEntry&, const DirEntry&) = default;
};

inline std::vector<DirEntry> list_directory(const std::string& rel_path,
                                            const SandboxPolicy& policy) {
    namespace fs = std::filesystem;
    const auto resolved = detail::resolve_in_sandbox(rel_path, policy);
    detail::check_denied(rel_path, resolved, policy);

    std::error_code ec;
    if (!fs::exists(resolved.absolute, ec)) {
        throw NotFoundError("no such path: " + rel_path);
    }
    if (!fs::is_directory(resolved.absolute, ec)) {
        throw NotFoundError("not a directory: " + rel_path);
    }

    std::vector<DirEntry> entries;
    for (const auto& item : fs::directory_iterator(resolved.absolute, ec)) {
        const std::string name = item.path().filename().string();
        const std::string child_rel =
            resolved.relative.empty() ? name : resolved.relative + "/" + name;
        if (matches_any(policy.deny_patterns, child_rel) ||
            matches_any(policy.noise_patterns, child_rel)) {
            continue;
        }
        DirEntry e;
        e.name = name;
        std::error_code item_ec;
        if (item.is_directory(item_ec)) {
            e.kind = EntryKind::dir;
        } else {
            e.kind = EntryKind::file;
            e.size_bytes = item.is_regular_file(item_ec) ? item.file_size(item_ec) : 0;
            if (item_ec) e.size_bytes = 0;
        }
        entries.push_back(std::move(e));
    }
    std::sort(entries.begin(), entries.end(),
              [](const DirEntry& a, const DirEntry& b) { return a.name < b.name; });
    return entries;
}

// ---------------------------------------------------------------------------
// read_file

struct ReadResult {
    std::string content;  // file bytes up to the cap, plus a marker line when cut
    bool truncated = false;
};

inline ReadResult read_file(const std::string& rel_path, const SandboxPolicy& policy) {
    namespace fs = std::filesystem;
    const auto resolved = detail::resolve_in_sandbox(rel_path, policy);
    detail::check_denied(rel_path, resolved, policy);

    std::error_code ec;
    if (!fs::exists(resolved.absolute, ec) || !fs::is_regular_file(resolved.absolute, ec)) {
        throw NotFoundError("no such file: " + rel_path);
    }
    const std::uint64_t size = fs::file_size(resolved.absolute, ec);
    if (ec) throw NotFoundError("cannot stat file: " + rel_path);

    std::ifstream in(resolved.absolute, std::ios::binary);
    if (!in) throw NotFoundError("cannot open file: " + rel_path);

    ReadResult out;
    out.truncated = size > policy.max_read_bytes;
    const std::uint64_t take = std::min<std::uint64_t>(size, policy.max_read_bytes);
    out.content.resize(static_cast<std::size_t>(take));
    in.read(out.content.data(), static_cast<std::streamsize>(take));
    if (static_cast<std::uint64_t>(in.gcount()) != take) {
        throw NotFoundError("short read on file: " + rel_path);
    }
    if (out.content.find('\0') != std::string::npos) {
        throw BinaryFileError("binary file (contains NUL bytes): " + rel_path);
    }
    if (out.truncated) {
        out.content += "\n[truncated: showing first " + std::to_string(take) + " of " +
                       std::to_string(size) + " bytes]";
    }
    return out;
}

// ---------------------------------------------------------------------------
// dispatch

inline std::vector<ToolSchema> toolbox_schemas() {
    return {
        ToolSchema{"list_directory",
                   "List files and directories at a repository-relative path.",
                   {ToolParam{"path", "string", true}}},
        ToolSchema{"read_file",
                   "Read a text file at a repository-relative path.",
                   {ToolParam{"path", "string", true}}},
    };
}

inline std::string render_listing(const std::vector<DirEntry>& entries) {
    if (entries.empty()) return "(empty)";
    std::string out;
    for (const auto& e : entries) {
        if (!out.empty()) out += '\n';
        if (e.kind == EntryKind::dir) {
            out += e.name + "/";
        } else {
            out += e.name + " (" + std::to_string(e.size_bytes) + " bytes)";
        }
    }
    return out;
}

inline Message dispatch(const ToolCall& call, const SandboxPolicy& policy) {
    Message reply;
    reply.role = Role::tool;
    reply.tool_call_id = call.id;
    try {
        if (call.tool_name == "list_directory" || call.tool_name == "read_file") {
            if (!call.arguments.is_object() || !call.arguments.contains("path") ||
                !call.arguments.at("path").is_string()) {
                reply.content = "error: missing required string argument 'path'";
                return reply;
            }
            const std::string path = call.arguments.at("path").get<std::string>();
            if (call.tool_name == "list_directory") {
                reply.content = render_listing(list_directory(path, policy));
            } else {
                reply.content = read_file(path, policy).content;
            }
        } else {
            reply.content = "error: unknown tool '" + call.tool_name + "'";
        }
    } catch (const std::exception& e) {
        reply.content = std::string("error: ") + e.what();
    }
    return reply;
}

}  // namespace solharness
