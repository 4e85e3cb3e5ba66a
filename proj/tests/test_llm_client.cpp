#include "care/llm_client.hpp"

#include <atomic>
#include <thread>
#include <vector>

#include "care/digest.hpp"
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace care;
using testutil::TempDir;

namespace {

llm::LLMRequest basic_request(const std::string& content = "hello") {
    llm::LLMRequest req;
    req.model_name = "test-model";
    req.messages = {{"system", content}, {"user", "Respond now."}};
    return req;
}

// Deterministic manual clock; sleeping advances time.
class FakeClock : public llm::Clock {
public:
    std::int64_t now_ms() override { return now_; }
    void sleep_ms(std::int64_t ms) override { now_ += ms; }
    std::int64_t now_ = 0;
};

struct TestServer {
    httplib::Server server;
    int port = 0;
    std::thread thread;

    explicit TestServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server.Post("/v1/chat/completions", std::move(handler));
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~TestServer() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("sha256 matches the published test vectors") {
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // force the two-block padding path
    CHECK(sha256_hex(std::string(56, 'a')).size() == 64);
}

TEST_CASE("crc32 matches the IEEE check value") {
    const std::string data = "123456789";
    CHECK(crc32(data.data(), data.size()) == 0xCBF43926u);
}

TEST_CASE("request_hash is stable and ignores operational knobs") {
    const auto a = llm::request_hash(basic_request());
    const auto b = llm::request_hash(basic_request());
    CHECK(a == b);
    CHECK(a.size() == 64);

    auto changed = basic_request();
    changed.messages[0].content = "hellp";
    CHECK(llm::request_hash(changed) != a);

    auto tweaked = basic_request();
    tweaked.timeout = std::chrono::milliseconds(123);
    tweaked.max_tokens = 9;
    CHECK(llm::request_hash(tweaked) == a);

    auto warm = basic_request();
    warm.temperature = 0.7;
    CHECK(llm::request_hash(warm) != a);
}

TEST_CASE("cache stores and looks up by hash") {
    TempDir dir;
    CHECK(!llm::cache_lookup(dir.file("cache"), std::string(64, 'a')).has_value());
    llm::cache_store(dir.file("cache"), std::string(64, 'a'), "reply");
    const auto hit = llm::cache_lookup(dir.file("cache"), std::string(64, 'a'));
    REQUIRE(hit.has_value());
    CHECK(*hit == "reply");
}

TEST_CASE("concurrent writers of one hash never produce a torn entry") {
    TempDir dir;
    const std::string hash(64, 'b');
    const std::string value_a(4096, 'A');
    const std::string value_b(4096, 'B');
    std::vector<std::thread> writers;
    for (int t = 0; t < 8; ++t) {
        writers.emplace_back([&, t] {
            for (int i = 0; i < 25; ++i) {
                llm::cache_store(dir.file("cache"), hash, t % 2 == 0 ? value_a : value_b);
            }
        });
    }
    for (auto& t : writers) t.join();
    const auto got = llm::cache_lookup(dir.file("cache"), hash);
    REQUIRE(got.has_value());
    CHECK((*got == value_a || *got == value_b));
}

TEST_CASE("mock providers are deterministic") {
    SUBCASE("reverse_candidates reverses the numbered list") {
        llm::MockScript script;
        script.mode = llm::MockMode::reverse_candidates;
        llm::MockProvider mock(script);
        auto req = basic_request(
            "role text\n\nDomain expert's recommendations:\n1. A\n2. B\n3. C");
        CHECK(mock.complete(req).text == "1. C\n2. B\n3. A");
    }

    SUBCASE("echo_candidates returns the list verbatim") {
        llm::MockScript script;
        script.mode = llm::MockMode::echo_candidates;
        llm::MockProvider mock(script);
        auto req = basic_request(
            "intro\n\nDomain expert's recommendations:\n1. A\n2. B\n3. C");
        CHECK(mock.complete(req).text == "1. A\n2. B\n3. C");
    }

    SUBCASE("fixed returns a constant") {
        llm::MockProvider mock(llm::MockScript{});
        CHECK(mock.complete(basic_request()).text == "1. The Matrix");
        CHECK(mock.complete(basic_request("other")).text == "1. The Matrix");
    }

    SUBCASE("scripted pops in order and repeats the last reply") {
        llm::MockScript script;
        script.mode = llm::MockMode::scripted;
        script.scripted_replies = {"one", "two"};
        llm::MockProvider mock(script);
        CHECK(mock.complete(basic_request()).text == "one");
        CHECK(mock.complete(basic_request()).text == "two");
        CHECK(mock.complete(basic_request()).text == "two");
    }

    SUBCASE("scripted mode requires replies") {
        llm::MockScript script;
        script.mode = llm::MockMode::scripted;
        CHECK_THROWS_AS(llm::MockProvider{script}, std::invalid_argument);
    }
}

TEST_CASE("client serves cached replies without touching the provider") {
    TempDir dir;
    const auto req = basic_request();
    llm::ClientConfig config;
    config.cache_dir = dir.file("cache");
    llm::cache_store(config.cache_dir, llm::request_hash(req), "X");

    auto provider = std::make_shared<llm::MockProvider>(llm::MockScript{});
    llm::Client client(provider, config);
    const auto resp = client.complete(req);
    CHECK(resp.text == "X");
    CHECK(resp.from_cache);
    CHECK(client.provider_calls() == 0);

    // a novel request reaches the provider and is then cached
    const auto fresh = basic_request("something new");
    CHECK(!client.complete(fresh).from_cache);
    CHECK(client.provider_calls() == 1);
    CHECK(client.complete(fresh).from_cache);
    CHECK(client.provider_calls() == 1);
}

TEST_CASE("http provider parses the chat-completions schema") {
    std::atomic<int> hits{0};
    std::string seen_auth;
    TestServer server([&](const httplib::Request& req, httplib::Response& res) {
        hits.fetch_add(1);
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        CHECK(body["model"] == "test-model");
        CHECK(body["temperature"] == 0.0);
        nlohmann::json reply = {
            {"choices", {{{"message", {{"role", "assistant"}, {"content", "1. Alien"}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });

    llm::HttpConfig config;
    config.base_url = server.url();
    config.api_key = "sk-test";
    llm::HttpProvider provider(config);
    const auto resp = provider.complete(basic_request());
    CHECK(resp.text == "1. Alien");
    CHECK(hits.load() == 1);
    CHECK(seen_auth == "Bearer sk-test");
}

TEST_CASE("http provider retries transient failures then gives up") {
    std::atomic<int> hits{0};
    TestServer server([&](const httplib::Request&, httplib::Response& res) {
        hits.fetch_add(1);
        res.status = 500;
    });

    FakeClock clock;
    llm::HttpConfig config;
    config.base_url = server.url();
    config.api_key = "sk-test";
    config.max_attempts = 5;
    config.backoff_base_ms = 8;
    llm::HttpProvider provider(config, &clock);
    CHECK(testutil::thrown_message([&] { provider.complete(basic_request()); })
              .find("retries exhausted") != std::string::npos);
    CHECK(hits.load() == 5);
    // exponential backoff: 8 + 16 + 32 + 64
    CHECK(clock.now_ == 120);
}

TEST_CASE("http provider fails fast on non-retryable statuses") {
    std::atomic<int> hits{0};
    TestServer server([&](const httplib::Request&, httplib::Response& res) {
        hits.fetch_add(1);
        res.status = 404;
        res.set_content("no such route", "text/plain");
    });

    llm::HttpConfig config;
    config.base_url = server.url();
    config.api_key = "sk-test";
    llm::HttpProvider provider(config);
    CHECK(testutil::thrown_message([&] { provider.complete(basic_request()); })
              .find("404") != std::string::npos);
    CHECK(hits.load() == 1);
}

TEST_CASE("http provider treats malformed payloads as errors") {
    TestServer server([&](const httplib::Request&, httplib::Response& res) {
        res.set_content("{\"choices\":[]}", "application/json");
    });
    llm::HttpConfig config;
    config.base_url = server.url();
    config.api_key = "sk-test";
    llm::HttpProvider provider(config);
    CHECK(testutil::thrown_message([&] { provider.complete(basic_request()); })
              .find("malformed") != std::string::npos);
}

TEST_CASE("missing credential fails before any network call") {
    llm::HttpConfig config;
    config.base_url = "http://127.0.0.1:1";
    llm::HttpProvider provider(config);
    CHECK(testutil::thrown_message([&] { provider.complete(basic_request()); })
              .find("missing credential") != std::string::npos);
}

TEST_CASE("rate limiter admits at most r dispatches per sliding second") {
    FakeClock clock;
    llm::RateLimiter limiter(3.0, clock);
    std::vector<std::int64_t> times;
    for (int i = 0; i < 10; ++i) {
        limiter.acquire();
        times.push_back(clock.now_ms());
    }
    for (std::size_t i = 0; i < times.size(); ++i) {
        std::size_t in_window = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            if (times[j] > times[i] - 1000) ++in_window;
        }
        CHECK(in_window <= 3);
    }
    CHECK(times.back() >= 3000);  // 10 requests at 3/s need at least 3 seconds
}

TEST_CASE("client bounds in-flight concurrency") {
    class SlowProvider : public llm::Provider {
    public:
        llm::LLMResponse complete(const llm::LLMRequest&) override {
            const int now = in_flight.fetch_add(1) + 1;
            int snapshot = peak.load();
            while (now > snapshot && !peak.compare_exchange_weak(snapshot, now)) {
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
            in_flight.fetch_sub(1);
            return {"ok", "slow", {}, false};
        }
        std::string name() const override { return "slow"; }
        std::atomic<int> in_flight{0};
        std::atomic<int> peak{0};
    };

    auto provider = std::make_shared<SlowProvider>();
    llm::ClientConfig config;
    config.max_concurrency = 2;
    llm::Client client(provider, config);

    std::vector<std::thread> callers;
    for (int i = 0; i < 8; ++i) {
        callers.emplace_back([&, i] {
            client.complete(basic_request("req " + std::to_string(i)));
        });
    }
    for (auto& t : callers) t.join();
    CHECK(provider->peak.load() <= 2);
    CHECK(client.provider_calls() == 8);
}
