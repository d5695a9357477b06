#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "plansite/common.hpp"
#include "plansite/corpus.hpp"

namespace plansite::corpus {

FixtureProvider::FixtureProvider(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read provider fixture: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            responses_.push_back(nlohmann::json::parse(line).at("response").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("provider fixture: ") + e.what(), line_no);
        }
    }
}

std::string FixtureProvider::complete(const std::string& prompt) {
    if (next_ >= responses_.size()) throw IoError("provider fixture exhausted");
    prompts_.push_back(prompt);
    return responses_[next_++];
}

struct HttpProvider::Impl {
    Options opts;
    std::string key;
    std::mutex mu;
    std::chrono::steady_clock::time_point last{};
};

HttpProvider::HttpProvider(Options opts) : impl_(std::make_unique<Impl>()) {
    impl_->opts = std::move(opts);
    if (const char* k = std::getenv(impl_->opts.api_key_env.c_str())) impl_->key = k;
}

HttpProvider::~HttpProvider() = default;

std::string HttpProvider::complete(const std::string& prompt) {
    std::lock_guard lock(impl_->mu);
    const auto& o = impl_->opts;
    if (o.min_interval_ms > 0) {
        const auto due = impl_->last + std::chrono::milliseconds(o.min_interval_ms);
        std::this_thread::sleep_until(due);
    }
    httplib::Client cli(o.host, o.port);
    cli.set_read_timeout(o.timeout_seconds, 0);
    cli.set_connection_timeout(o.timeout_seconds, 0);
    httplib::Headers headers;
    if (!impl_->key.empty()) headers.emplace("Authorization", "Bearer " + impl_->key);
    const nlohmann::json body = {{"model", o.model},
                                 {"temperature", o.temperature},
                                 {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
    auto res = cli.Post(o.path, headers, body.dump(), "application/json");
    impl_->last = std::chrono::steady_clock::now();
    if (!res) throw IoError("provider request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw IoError("provider returned HTTP " + std::to_string(res->status));
    try {
        return nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("provider response malformed: ") + e.what());
    }
}

std::string synthesis_prompt(const std::string& topic) {
    return "Write one original rhyming couplet about " + topic +
           ". Reply with exactly two lines and nothing else. The first line must end with a comma.";
}

namespace {

std::optional<std::pair<std::string, std::string>> two_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string l = text.substr(pos, nl - pos);
        const auto b = l.find_first_not_of(" \t\r");
        const auto e = l.find_last_not_of(" \t\r");
        if (b != std::string::npos) lines.push_back(l.substr(b, e - b + 1));
        pos = nl + 1;
    }
    if (lines.size() != 2) return std::nullopt;
    return std::pair{lines[0], lines[1]};
}

}  // namespace

SynthesisReport synthesize_couplets(TextProvider& provider, const SynthesisSpec& spec,
                                    const phonology::PronunciationLexicon& lexicon) {
    if (spec.topics.empty()) throw ValidationError("synthesize_couplets: at least one topic required");
    const std::size_t budget = spec.max_attempts ? spec.max_attempts : 5 * spec.count;
    SynthesisReport rep;
    while (rep.couplets.size() < spec.count && rep.attempts < budget) {
        const std::string& topic = spec.topics[rep.attempts % spec.topics.size()];
        ++rep.attempts;
        std::string text;
        std::size_t tries = 0;
        for (;;) {
            try {
                text = provider.complete(synthesis_prompt(topic));
                break;
            } catch (const IoError& e) {
                ++rep.provider_failures;
                if (++tries > spec.provider_retries) {
                    throw IoError(std::string("provider failed after retries: ") + e.what());
                }
            }
        }
        const std::string id = spec.id_prefix + std::to_string(rep.attempts - 1);
        auto lines = two_lines(text);
        if (!lines) {
            rep.rejected.push_back({id, "response is not exactly two lines"});
            continue;
        }
        Couplet c;
        c.id = id;
        c.line1 = lines->first;
        c.line2 = lines->second;
        c.topic = topic;
        c.split = "train";
        try {
            c.r1 = phonology::final_word(c.line1);
            c.r2 = phonology::final_word(c.line2);
        } catch (const ValidationError&) {
            rep.rejected.push_back({id, "line without a final word"});
            continue;
        }
        if (auto why = couplet_violation(c, lexicon, phonology::IdenticalWordPolicy::exclude_identical)) {
            rep.rejected.push_back({id, *why});
            continue;
        }
        rep.couplets.push_back(std::move(c));
    }
    const double yield = rep.attempts ? static_cast<double>(rep.couplets.size()) / static_cast<double>(rep.attempts) : 0.0;
    if (rep.couplets.size() < spec.count || yield < spec.min_yield) {
        throw ValidationError("couplet synthesis yield too low: " + std::to_string(rep.couplets.size()) + " accepted of " +
                              std::to_string(rep.attempts) + " attempts (" + std::to_string(rep.rejected.size()) +
                              " rejected)");
    }
    return rep;
}

}  // namespace plansite::corpus
